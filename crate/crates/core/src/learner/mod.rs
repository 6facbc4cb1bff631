//! Compile interactions into skills: semantic constraints from the reasoner
//! and geometric constraints fitted to the demonstrations.

mod fit;
mod program;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{Interaction, Phase, Segment};
use crate::reasoner::{ask, Payload, QueryKind, Reasoner, ReasonerError, ReasonerQuery};
use crate::scene::{face_label, ImageRenderer, Keypoint, Notation, RasterImage, Scene, SceneObject};
use crate::{ObjectProperties, Pose, Quat, Vec3};

pub use fit::{fit_arc, fit_line, fit_piecewise, fit_screw};
pub use program::{Anchor, Curve, NormalizedParams, Primitive, TrajectoryProgram};

pub const REGION_MARGIN: f64 = 0.02;
pub const CONE_MARGIN_DEG: f64 = 10.0;
pub const FIT_WARNING_M: f64 = 0.02;
pub const MAX_KEYPOINTS: usize = 10;
const PART_MARGIN_M: f64 = 0.005;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unsupported trajectory class '{0}'")]
    UnsupportedClass(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("program evaluation failed: {0}")]
    Evaluation(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizedInteraction {
    pub scene: Scene,
    #[serde(default)]
    pub images: Vec<RasterImage>,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticConstraints {
    pub statements: Vec<String>,
    /// Zero-based pose indices per group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub position_lo: Vec3,
    pub position_hi: Vec3,
    pub orientation_ref: Quat,
    pub orientation_cone_deg: f64,
}

impl Region {
    pub fn center(&self) -> Vec3 {
        (self.position_lo + self.position_hi) * 0.5
    }

    pub fn contains(&self, normalized: Vec3, orientation: Quat, tol: f64) -> bool {
        let inside = (0..3).all(|i| normalized[i] >= self.position_lo[i] - tol && normalized[i] <= self.position_hi[i] + tol);
        inside && orientation.angle_to(self.orientation_ref).to_degrees() <= self.orientation_cone_deg + tol
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let q = self.orientation_ref.canonical();
        let mut v = Vec::with_capacity(11);
        v.extend(self.position_lo.to_array());
        v.extend(self.position_hi.to_array());
        v.extend([q.w, q.x, q.y, q.z, self.orientation_cone_deg / 180.0]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspRegionSet {
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Geometric {
    Grasp(GraspRegionSet),
    Trajectory(TrajectoryProgram),
}

impl Geometric {
    pub fn to_vector(&self) -> Vec<f64> {
        match self {
            Geometric::Grasp(g) => g.regions.iter().flat_map(Region::to_vector).collect(),
            Geometric::Trajectory(p) => p.parameter_vector(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub description: String,
    pub phase: Phase,
    pub master_id: String,
    pub slave_id: String,
    /// Box extents of the demonstration master the constraints were learned on.
    pub master_extents: Vec3,
    pub semantic: SemanticConstraints,
    pub geometric: Geometric,
    pub provenance: Vec<String>,
    /// The rendered reference interaction shown to the reasoner during adaptation.
    pub reference: Scene,
}

impl Skill {
    pub fn grasp_regions(&self) -> Option<&GraspRegionSet> {
        match &self.geometric {
            Geometric::Grasp(g) => Some(g),
            _ => None,
        }
    }

    pub fn program(&self) -> Option<&TrajectoryProgram> {
        match &self.geometric {
            Geometric::Trajectory(p) => Some(p),
            _ => None,
        }
    }
}

fn subsample_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|k| ((k as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize).collect()
}

fn part_at(master: &ObjectProperties, p: Vec3) -> Option<String> {
    master.parts.iter().find(|part| part.contains(p, PART_MARGIN_M)).map(|part| part.name.clone())
}

/// Annotated scene of interactions on their shared master, in the master frame.
pub fn render_interaction(
    interactions: &[Interaction],
    master: &ObjectProperties,
    renderer: Option<&dyn ImageRenderer>,
) -> VisualizedInteraction {
    let mut scene = Scene { objects: vec![SceneObject::from_props(master, Pose::identity())], ..Default::default() };
    let mut keypoints = Vec::new();
    let mut label = 0usize;
    for interaction in interactions {
        match interaction {
            Interaction::Grasp { grasp_poses } => {
                for g in grasp_poses {
                    label += 1;
                    let n = master.normalize(g.position);
                    scene.notations.push(Notation {
                        label: label.to_string(),
                        object: master.object_id.clone(),
                        position: n,
                        orientation: Some(g.orientation),
                        face: face_label(n),
                        part: part_at(master, g.position),
                    });
                }
            }
            Interaction::Manipulation { trajectory } => {
                if keypoints.is_empty() {
                    for (k, i) in subsample_indices(trajectory.len(), MAX_KEYPOINTS).into_iter().enumerate() {
                        keypoints.push(Keypoint { label: (k + 1).to_string(), position: trajectory[i].1.position });
                    }
                }
            }
        }
    }
    let phase = if interactions.iter().any(|i| matches!(i, Interaction::Grasp { .. })) {
        Phase::Grasping
    } else {
        Phase::Manipulation
    };
    scene.set_fact("phase", phase);
    scene.set_fact("master", &master.object_id);
    scene.set_fact("demo_count", interactions.len());
    scene.keypoints = keypoints.clone();
    let images = renderer.map(|r| r.render(&scene)).unwrap_or_default();
    VisualizedInteraction { scene, images, keypoints }
}

/// Semantic constraints from the reasoner: pose groups for grasping, a
/// trajectory class for manipulation.
pub fn learn_semantic(
    iv: &VisualizedInteraction,
    description: &str,
    reasoner: &dyn Reasoner,
) -> Result<SemanticConstraints, LearnError> {
    let phase: Phase = iv.scene.fact("phase").unwrap_or(Phase::Manipulation);
    let kind = match phase {
        Phase::Grasping => QueryKind::GraspGrouping,
        Phase::Manipulation => QueryKind::SemanticLearning,
    };
    let mut q = ReasonerQuery::new(kind, iv.scene.clone()).with_context(vec![format!("subtask: {description}")]);
    q.images = iv.images.clone();
    let resp = ask(reasoner, &q)?;
    match resp.payload {
        Payload::Groups { statements, groups } => Ok(SemanticConstraints {
            statements,
            grasp_groups: Some(groups.into_iter().map(|g| g.into_iter().map(|i| i - 1).collect()).collect()),
            trajectory_class: None,
        }),
        Payload::Semantic { statements, trajectory_class } => {
            Ok(SemanticConstraints { statements, grasp_groups: None, trajectory_class: Some(trajectory_class) })
        }
        other => Err(LearnError::Validation(format!("unexpected payload {:?}", other.kind()))),
    }
}

fn region_from(positions: &[Vec3], orientations: &[Quat]) -> Region {
    let first = positions[0];
    let (lo, hi) = positions.iter().fold((first, first), |(lo, hi), p| (lo.component_min(*p), hi.component_max(*p)));
    let q = Quat::mean(orientations).unwrap_or_else(Quat::identity);
    let dev = orientations.iter().map(|o| o.angle_to(q).to_degrees()).fold(0.0, f64::max);
    Region {
        position_lo: lo - Vec3::splat(REGION_MARGIN),
        position_hi: hi + Vec3::splat(REGION_MARGIN),
        orientation_ref: q,
        orientation_cone_deg: (dev + CONE_MARGIN_DEG).min(180.0),
    }
}

/// One region per semantic group, bounding the group's poses in normalized
/// box coordinates.
pub fn learn_grasp_geometric(
    sem: &SemanticConstraints,
    interactions: &[Interaction],
    master: &ObjectProperties,
) -> Result<GraspRegionSet, LearnError> {
    let groups = sem.grasp_groups.as_ref().ok_or_else(|| LearnError::Precondition("grasp groups missing".into()))?;
    let poses: Vec<Pose> = interactions
        .iter()
        .flat_map(|i| match i {
            Interaction::Grasp { grasp_poses } => grasp_poses.clone(),
            _ => Vec::new(),
        })
        .collect();
    let mut regions = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(LearnError::Validation(format!("group {gi} is empty")));
        }
        if let Some(bad) = g.iter().find(|&&i| i >= poses.len()) {
            return Err(LearnError::Validation(format!("group {gi} references pose {bad} of {}", poses.len())));
        }
        let pos: Vec<Vec3> = g.iter().map(|&i| master.normalize(poses[i].position)).collect();
        let ori: Vec<Quat> = g.iter().map(|&i| poses[i].orientation).collect();
        regions.push(region_from(&pos, &ori));
    }
    if regions.is_empty() {
        return Err(LearnError::Validation("no grasp groups".into()));
    }
    Ok(GraspRegionSet { regions })
}

/// Least-squares fit of the primitive family named by the trajectory class.
pub fn fit_trajectory_program(
    sem: &SemanticConstraints,
    interaction: &Interaction,
    master: &ObjectProperties,
) -> Result<TrajectoryProgram, LearnError> {
    let class = sem.trajectory_class.as_deref().ok_or_else(|| LearnError::Precondition("trajectory class missing".into()))?;
    let primitive = Primitive::from_class(class).ok_or_else(|| LearnError::UnsupportedClass(class.to_string()))?;
    let Interaction::Manipulation { trajectory } = interaction else {
        return Err(LearnError::Precondition("not a manipulation interaction".into()));
    };
    if trajectory.len() < 2 {
        return Err(LearnError::Precondition("trajectory needs at least 2 waypoints".into()));
    }
    let poses: Vec<Pose> = trajectory.iter().map(|(_, p)| *p).collect();
    let (curve, residual) = match primitive {
        Primitive::Line => fit_line(&poses)?,
        Primitive::Arc => fit_arc(&poses)?,
        Primitive::Screw => fit_screw(&poses)?,
        Primitive::PiecewiseLine => fit_piecewise(&poses)?,
    };
    let prog = TrajectoryProgram::from_curve(&curve, master, class, poses.len(), residual)?;
    if let Some(w) = &prog.warning {
        log::warn!("{w}");
    }
    Ok(prog)
}

/// Re-expresses master-frame poses on another master through normalized
/// box coordinates.
fn transfer(p: &Pose, from: &ObjectProperties, to: &ObjectProperties) -> Pose {
    Pose { position: to.denormalize(from.normalize(p.position)), orientation: p.orientation }
}

/// Demonstrations of one subtask: segment, interaction and the master's
/// properties as observed in that demonstration.
pub struct Demonstrated<'a> {
    pub segment: &'a Segment,
    pub interaction: &'a Interaction,
    pub master: &'a ObjectProperties,
}

/// Full per-subtask pipeline: render, semantic constraints, geometric constraints.
pub fn learn_skill(
    demos: &[Demonstrated<'_>],
    reasoner: &dyn Reasoner,
    renderer: Option<&dyn ImageRenderer>,
) -> Result<Skill, LearnError> {
    let first = demos.first().ok_or_else(|| LearnError::Precondition("no demonstrations".into()))?;
    let phase = first.segment.phase;
    if demos.iter().any(|d| d.segment.phase != phase || d.segment.master_id != first.segment.master_id) {
        return Err(LearnError::Precondition("demonstrations mix subtasks".into()));
    }
    let master = first.master;
    let provenance: Vec<String> = demos.iter().map(|d| d.segment.demo_id.clone()).collect();
    let (semantic, geometric, reference) = match phase {
        Phase::Grasping => {
            let interactions: Vec<Interaction> = demos
                .iter()
                .map(|d| match d.interaction {
                    Interaction::Grasp { grasp_poses } => Ok(Interaction::Grasp {
                        grasp_poses: grasp_poses.iter().map(|p| transfer(p, d.master, master)).collect(),
                    }),
                    _ => Err(LearnError::Precondition("grasping segment without grasp interaction".into())),
                })
                .collect::<Result<_, _>>()?;
            let iv = render_interaction(&interactions, master, renderer);
            let sem = learn_semantic(&iv, &first.segment.description, reasoner)?;
            let regions = learn_grasp_geometric(&sem, &interactions, master)?;
            (sem, Geometric::Grasp(regions), iv.scene)
        }
        Phase::Manipulation => {
            let iv = render_interaction(std::slice::from_ref(first.interaction), master, renderer);
            let sem = learn_semantic(&iv, &first.segment.description, reasoner)?;
            let mut best: Option<TrajectoryProgram> = None;
            for d in demos {
                let prog = fit_trajectory_program(&sem, d.interaction, d.master)?;
                if best.as_ref().is_none_or(|b| prog.residual_m < b.residual_m) {
                    best = Some(prog);
                }
            }
            (sem, Geometric::Trajectory(best.expect("at least one demo")), iv.scene)
        }
    };
    Ok(Skill {
        description: first.segment.description.clone(),
        phase,
        master_id: first.segment.master_id.clone(),
        slave_id: first.segment.slave_id.clone(),
        master_extents: master.bbox_extents,
        semantic,
        geometric,
        provenance,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{compute_bbox, PointCloud};

    fn cube(side: f64) -> ObjectProperties {
        let h = side / 2.0;
        compute_bbox("drawer", &PointCloud::new(vec![Vec3::splat(-h), Vec3::splat(h)], "drawer")).unwrap()
    }

    #[test]
    fn keypoint_subsampling() {
        assert_eq!(subsample_indices(2, 10), vec![0, 1]);
        let idx = subsample_indices(100, 10);
        assert_eq!(idx.len(), 10);
        assert_eq!((idx[0], idx[9]), (0, 99));
    }

    #[test]
    fn notations_enumerate_poses() {
        let master = cube(1.0);
        let poses = (0..3).map(|i| Pose::from_translation(Vec3::new(0.1 * i as f64, 0.5, 0.0))).collect();
        let iv = render_interaction(&[Interaction::Grasp { grasp_poses: poses }], &master, None);
        let labels: Vec<&str> = iv.scene.notations.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, ["1", "2", "3"]);
        assert_eq!(iv.scene.notations[2].position, Vec3::new(0.2, 0.5, 0.0));
        assert_eq!(iv.scene.notations[0].face, "+y");
    }

    #[test]
    fn singleton_region_is_inflated_point() {
        let master = cube(1.0);
        let p = Pose::from_translation(Vec3::new(0.0, 0.45, 0.1));
        let sem = SemanticConstraints { statements: vec!["s".into()], grasp_groups: Some(vec![vec![0]]), trajectory_class: None };
        let set = learn_grasp_geometric(&sem, &[Interaction::Grasp { grasp_poses: vec![p] }], &master).unwrap();
        let r = &set.regions[0];
        assert!((r.position_lo.y - 0.43).abs() < 1e-12 && (r.position_hi.y - 0.47).abs() < 1e-12);
        assert!((r.orientation_cone_deg - CONE_MARGIN_DEG).abs() < 1e-9);
        assert!(r.contains(Vec3::new(0.0, 0.45, 0.1), p.orientation, 0.0));
    }

    #[test]
    fn two_poses_span_their_difference() {
        let master = cube(1.0);
        let poses = vec![Pose::from_translation(Vec3::new(-0.1, 0.0, 0.0)), Pose::from_translation(Vec3::new(0.1, 0.0, 0.0))];
        let sem = SemanticConstraints { statements: vec!["s".into()], grasp_groups: Some(vec![vec![0, 1]]), trajectory_class: None };
        let set = learn_grasp_geometric(&sem, &[Interaction::Grasp { grasp_poses: poses }], &master).unwrap();
        assert!(set.regions[0].position_hi.x - set.regions[0].position_lo.x >= 0.2);
        let empty = SemanticConstraints { grasp_groups: Some(vec![vec![]]), ..sem };
        assert!(matches!(
            learn_grasp_geometric(&empty, &[], &master),
            Err(LearnError::Validation(_))
        ));
    }

    #[test]
    fn unknown_class_rejected() {
        let master = cube(1.0);
        let sem = SemanticConstraints { statements: vec!["s".into()], grasp_groups: None, trajectory_class: Some("teleport".into()) };
        let traj = vec![(0.0, Pose::identity()), (1.0, Pose::from_translation(Vec3::new(0.1, 0.0, 0.0)))];
        assert!(matches!(
            fit_trajectory_program(&sem, &Interaction::Manipulation { trajectory: traj }, &master),
            Err(LearnError::UnsupportedClass(_))
        ));
    }

    #[test]
    fn zero_radius_arc_is_degenerate() {
        let poses: Vec<Pose> = (0..10).map(|i| Pose::from_translation(Vec3::new(0.01 * i as f64, 0.0, 0.0))).collect();
        assert!(matches!(fit_arc(&poses), Err(LearnError::DegenerateFit(_))));
    }
}
