//! Structured annotated scenes: what a reasoner is shown.
//!
//! A scene lists objects with their boxes and parts, numbered notations on
//! poses or keypoints, an optional grasp grid, and free-form facts. Raster
//! projections are optional and produced by an [`ImageRenderer`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{ObjectProperties, Part, Pose, Quat, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    /// Object pose in the scene's reference frame.
    pub pose: Pose,
    pub bbox_center: Pose,
    pub extents: Vec3,
    #[serde(default)]
    pub parts: Vec<Part>,
}

impl SceneObject {
    pub fn from_props(props: &ObjectProperties, pose: Pose) -> Self {
        Self {
            id: props.object_id.clone(),
            pose,
            bbox_center: props.bbox_center,
            extents: props.bbox_extents,
            parts: props.parts.clone(),
        }
    }

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        self.bbox_center.inverse().transform_point(p).component_div(self.extents)
    }

    pub fn normalized_part(&self, part: &Part) -> (Vec3, Vec3) {
        let (a, b) = (self.normalize(part.lo), self.normalize(part.hi));
        (a.component_min(b), a.component_max(b))
    }
}

/// A labeled mark on the scene, positioned in normalized box coordinates of
/// the object it annotates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notation {
    pub label: String,
    pub object: String,
    pub position: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Quat>,
    pub face: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub label: String,
    pub position: Vec3,
}

/// Box face nearest to a normalized position: `+x`, `-y`, ...
pub fn face_label(n: Vec3) -> String {
    let axis = n.argmax_abs();
    let sign = if n[axis] >= 0.0 { '+' } else { '-' };
    format!("{sign}{}", ['x', 'y', 'z'][axis])
}

/// One 2-D view of the grasp grid: cells are columns along `column_axis`
/// and rows along the shared `row_axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perspective {
    pub name: String,
    pub column_axis: usize,
    pub row_axis: usize,
}

/// An `m x n` discretization of the master box seen from two perspectives
/// that share the row axis. Rows are letters from the low end of the row
/// axis, columns are numbers from the low end of the column axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspGrid {
    pub m: usize,
    pub n: usize,
    pub perspectives: [Perspective; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl GraspGrid {
    pub fn new(m: usize, n: usize) -> Result<Self, String> {
        if m < 2 || n < 2 || m > 26 {
            return Err(format!("grid {m}x{n} invalid: need 2 <= m <= 26 and n >= 2"));
        }
        Ok(Self {
            m,
            n,
            perspectives: [
                Perspective { name: "A".into(), column_axis: 0, row_axis: 2 },
                Perspective { name: "B".into(), column_axis: 1, row_axis: 2 },
            ],
        })
    }

    /// The world axis both perspectives share.
    pub fn overlap_axis(&self) -> usize {
        self.perspectives[0].row_axis
    }

    pub fn label(&self, cell: Cell) -> String {
        format!("{}{}", (b'A' + cell.row as u8) as char, cell.col + 1)
    }

    pub fn parse_cell(&self, label: &str) -> Option<Cell> {
        let label = label.trim();
        let mut chars = label.chars();
        let letter = chars.next()?.to_ascii_uppercase();
        if !letter.is_ascii_uppercase() {
            return None;
        }
        let row = (letter as u8 - b'A') as usize;
        let col: usize = chars.as_str().parse().ok()?;
        (row < self.m && col >= 1 && col <= self.n).then_some(Cell { row, col: col - 1 })
    }

    /// A selection is one cell (`C4`) or an inclusive rectangle (`C4:E6`).
    pub fn parse_selection(&self, sel: &str) -> Option<(Cell, Cell)> {
        match sel.split_once(':') {
            Some((a, b)) => {
                let (a, b) = (self.parse_cell(a)?, self.parse_cell(b)?);
                Some((
                    Cell { row: a.row.min(b.row), col: a.col.min(b.col) },
                    Cell { row: a.row.max(b.row), col: a.col.max(b.col) },
                ))
            }
            None => {
                let c = self.parse_cell(sel)?;
                Some((c, c))
            }
        }
    }

    pub fn format_selection(&self, lo: Cell, hi: Cell) -> String {
        if lo == hi {
            self.label(lo)
        } else {
            format!("{}:{}", self.label(lo), self.label(hi))
        }
    }

    /// Normalized interval covered by rows (or columns) `lo..=hi`.
    pub fn span(count: usize, lo: usize, hi: usize) -> (f64, f64) {
        (lo as f64 / count as f64 - 0.5, (hi + 1) as f64 / count as f64 - 0.5)
    }

    pub fn index_of(count: usize, v: f64) -> usize {
        (((v + 0.5) * count as f64).floor().max(0.0) as usize).min(count - 1)
    }

    /// Cells whose centers fall in `[lo, hi]`, or the cell holding the
    /// interval midpoint when the interval is narrower than a cell.
    pub fn cover(count: usize, lo: f64, hi: f64) -> (usize, usize) {
        let inside: Vec<usize> = (0..count)
            .filter(|&i| {
                let c = (i as f64 + 0.5) / count as f64 - 0.5;
                c >= lo - 1e-12 && c <= hi + 1e-12
            })
            .collect();
        match (inside.first(), inside.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                let i = Self::index_of(count, 0.5 * (lo + hi));
                (i, i)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub notations: Vec<Notation>,
    #[serde(default)]
    pub keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GraspGrid>,
    #[serde(default)]
    pub facts: BTreeMap<String, serde_json::Value>,
}

impl Scene {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn has_object(&self, id: &str) -> bool {
        self.object(id).is_some()
    }

    pub fn fact_str(&self, key: &str) -> Option<&str> {
        self.facts.get(key).and_then(|v| v.as_str())
    }

    pub fn fact<T: serde::de::DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.facts.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn set_fact(&mut self, key: &str, value: impl Serialize) {
        self.facts.insert(key.into(), serde_json::to_value(value).expect("serializable fact"));
    }

    /// Checks label uniqueness and that keypoints are referenced at most once.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.notations {
            if !seen.insert(n.label.as_str()) {
                return Err(format!("duplicate notation label '{}'", n.label));
            }
            if !self.has_object(&n.object) {
                return Err(format!("notation '{}' refers to unknown object '{}'", n.label, n.object));
            }
        }
        let mut kp = std::collections::BTreeSet::new();
        for k in &self.keypoints {
            if !kp.insert(k.label.as_str()) {
                return Err(format!("duplicate keypoint label '{}'", k.label));
            }
        }
        Ok(())
    }

    /// Plain-text serialization used in prompts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = |p: Vec3| format!("({:.4}, {:.4}, {:.4})", p.x, p.y, p.z);
        s.push_str("objects:\n");
        for o in &self.objects {
            let _ = writeln!(s, "- {} at {} extents {}", o.id, v(o.pose.position), v(o.extents));
            for p in &o.parts {
                let (lo, hi) = o.normalized_part(p);
                let _ = writeln!(s, "  part {} normalized {} .. {}", p.name, v(lo), v(hi));
            }
        }
        if !self.notations.is_empty() {
            s.push_str("notations (normalized box coordinates):\n");
            for n in &self.notations {
                let part = n.part.as_deref().map(|p| format!(" part {p}")).unwrap_or_default();
                let _ = writeln!(s, "- {} on {} at {} face {}{}", n.label, n.object, v(n.position), n.face, part);
            }
        }
        if !self.keypoints.is_empty() {
            s.push_str("keypoints (meters, reference frame):\n");
            for k in &self.keypoints {
                let _ = writeln!(s, "- {} {}", k.label, v(k.position));
            }
        }
        if let Some(g) = &self.grid {
            let axes = ['x', 'y', 'z'];
            let _ = writeln!(s, "grid: {} rows (A..) x {} columns (1..)", g.m, g.n);
            for p in &g.perspectives {
                let _ = writeln!(
                    s,
                    "- perspective {}: columns along {}, rows along {}",
                    p.name, axes[p.column_axis], axes[p.row_axis]
                );
            }
        }
        for (k, val) in &self.facts {
            let _ = writeln!(s, "fact {k}: {val}");
        }
        s
    }
}

/// A grayscale raster image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub trait ImageRenderer: Send + Sync {
    fn render(&self, scene: &Scene) -> Vec<RasterImage>;
}

/// Axis-aligned orthographic projections of every object box onto the grid
/// perspectives (or x-z and y-z when no grid is set), with notations as dots.
#[derive(Debug, Clone)]
pub struct OrthoRenderer {
    pub size: usize,
}

impl Default for OrthoRenderer {
    fn default() -> Self {
        Self { size: 128 }
    }
}

impl ImageRenderer for OrthoRenderer {
    fn render(&self, scene: &Scene) -> Vec<RasterImage> {
        let views = match &scene.grid {
            Some(g) => g.perspectives.iter().map(|p| (p.name.clone(), p.column_axis, p.row_axis)).collect(),
            None => vec![("A".to_string(), 0, 2), ("B".to_string(), 1, 2)],
        };
        let Some(target) = scene.objects.first() else { return vec![] };
        views
            .into_iter()
            .map(|(name, u, w)| {
                let n = self.size;
                let mut pixels = vec![255u8; n * n];
                let px = |v: f64| (((v + 0.5) * (n - 1) as f64).round().clamp(0.0, (n - 1) as f64)) as usize;
                let fill = |lo: Vec3, hi: Vec3, shade: u8, pixels: &mut Vec<u8>| {
                    for r in px(lo[w])..=px(hi[w]) {
                        for c in px(lo[u])..=px(hi[u]) {
                            let idx = (n - 1 - r) * n + c;
                            pixels[idx] = pixels[idx].min(shade);
                        }
                    }
                };
                fill(Vec3::splat(-0.5), Vec3::splat(0.5), 200, &mut pixels);
                for p in &target.parts {
                    let (lo, hi) = target.normalized_part(p);
                    fill(lo, hi, 120, &mut pixels);
                }
                for note in scene.notations.iter().filter(|x| x.object == target.id) {
                    fill(note.position - Vec3::splat(0.02), note.position + Vec3::splat(0.02), 0, &mut pixels);
                }
                RasterImage { name, width: n, height: n, pixels }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_labels_round_trip() {
        let g = GraspGrid::new(10, 10).unwrap();
        assert_eq!(g.label(Cell { row: 0, col: 0 }), "A1");
        assert_eq!(g.label(Cell { row: 9, col: 9 }), "J10");
        for row in 0..10 {
            for col in 0..10 {
                let c = Cell { row, col };
                assert_eq!(g.parse_cell(&g.label(c)), Some(c));
            }
        }
        assert_eq!(g.parse_cell("Z99"), None);
        assert_eq!(g.parse_cell("K1"), None);
        assert_eq!(g.parse_cell("A11"), None);
        assert_eq!(g.parse_selection("C4:B2"), Some((Cell { row: 1, col: 1 }, Cell { row: 2, col: 3 })));
    }

    #[test]
    fn cover_and_span() {
        assert_eq!(GraspGrid::cover(10, -0.2, 0.2), (3, 6));
        let (lo, hi) = GraspGrid::span(10, 3, 6);
        assert!((lo + 0.2).abs() < 1e-12 && (hi - 0.2).abs() < 1e-12);
        assert_eq!(GraspGrid::cover(10, 0.5, 0.5), (9, 9));
        assert_eq!(GraspGrid::index_of(10, -0.5), 0);
        assert!(GraspGrid::new(1, 10).is_err());
    }

    #[test]
    fn faces() {
        assert_eq!(face_label(Vec3::new(0.1, -0.5, 0.2)), "-y");
        assert_eq!(face_label(Vec3::new(0.0, 0.0, 0.5)), "+z");
    }

    #[test]
    fn renders_two_views() {
        let obj = SceneObject {
            id: "box".into(),
            pose: Pose::identity(),
            bbox_center: Pose::identity(),
            extents: Vec3::splat(1.0),
            parts: vec![],
        };
        let scene = Scene { objects: vec![obj], ..Default::default() };
        let imgs = OrthoRenderer { size: 16 }.render(&scene);
        assert_eq!(imgs.len(), 2);
        assert!(imgs[0].to_pgm().starts_with(b"P5\n16 16\n255\n"));
    }
}
