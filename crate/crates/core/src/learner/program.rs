use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::{ObjectProperties, Pose, Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    Line,
    Arc,
    Screw,
    PiecewiseLine,
}

impl Primitive {
    pub fn from_class(class: &str) -> Option<Self> {
        let family = crate::reasoner::TRAJECTORY_CLASSES.iter().find(|(c, _)| *c == class)?.1;
        Some(match family {
            "line" => Primitive::Line,
            "arc" => Primitive::Arc,
            "screw" => Primitive::Screw,
            _ => Primitive::PiecewiseLine,
        })
    }
}

/// A slave-relative-to-master path with metric parameters in the master frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Curve {
    Line { start: Pose, direction: Vec3, length: f64 },
    /// Rotation of the start pose by `angle` about the axis through `center`.
    Arc { start: Pose, center: Vec3, axis: Vec3, angle: f64 },
    /// An arc with `advance` meters of translation along the axis.
    Screw { start: Pose, center: Vec3, axis: Vec3, angle: f64, advance: f64 },
    /// Constant orientation through the knots; the first knot is the start.
    PiecewiseLine { orientation: Quat, knots: Vec<Vec3> },
}

impl Curve {
    pub fn primitive(&self) -> Primitive {
        match self {
            Curve::Line { .. } => Primitive::Line,
            Curve::Arc { .. } => Primitive::Arc,
            Curve::Screw { .. } => Primitive::Screw,
            Curve::PiecewiseLine { .. } => Primitive::PiecewiseLine,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: f64| v.is_finite();
        let ok = match self {
            Curve::Line { start, direction, length } => {
                start.is_finite() && direction.is_finite() && direction.norm() > 1e-9 && finite(*length) && *length >= 0.0
            }
            Curve::Arc { start, center, axis, angle } => {
                start.is_finite() && center.is_finite() && axis.norm() > 1e-9 && axis.is_finite() && finite(*angle)
            }
            Curve::Screw { start, center, axis, angle, advance } => {
                start.is_finite()
                    && center.is_finite()
                    && axis.norm() > 1e-9
                    && axis.is_finite()
                    && finite(*angle)
                    && finite(*advance)
            }
            Curve::PiecewiseLine { orientation, knots } => {
                orientation.is_finite() && (2..=4).contains(&knots.len()) && knots.iter().all(|k| k.is_finite())
            }
        };
        if !ok {
            return Err(format!("{:?} parameters violate primitive invariants", self.primitive()));
        }
        if let Curve::Arc { start, center, axis, .. } | Curve::Screw { start, center, axis, .. } = self {
            let a = axis.try_normalize().expect("checked non-zero");
            let d = start.position - *center;
            if (d - a * d.dot(a)).norm() < 1e-9 {
                return Err("arc radius is zero".into());
            }
        }
        Ok(())
    }

    pub fn start(&self) -> Pose {
        match self {
            Curve::Line { start, .. } | Curve::Arc { start, .. } | Curve::Screw { start, .. } => *start,
            Curve::PiecewiseLine { orientation, knots } => Pose { position: knots[0], orientation: *orientation },
        }
    }

    /// Pose at parameter `s` in `[0, 1]`: uniform in length for lines, in
    /// angle for arcs and screws.
    pub fn pose_at(&self, s: f64) -> Pose {
        match self {
            Curve::Line { start, direction, length } => {
                let d = direction.try_normalize().unwrap_or(*direction);
                Pose { position: start.position + d * (length * s), orientation: start.orientation }
            }
            Curve::Arc { start, center, axis, angle } => {
                let a = axis.try_normalize().unwrap_or(*axis);
                Pose::rotation_about(*center, Quat::from_axis_angle(a, angle * s)).mul_pose(start)
            }
            Curve::Screw { start, center, axis, angle, advance } => {
                let a = axis.try_normalize().unwrap_or(*axis);
                let mut p = Pose::rotation_about(*center, Quat::from_axis_angle(a, angle * s)).mul_pose(start);
                p.position = p.position + a * (advance * s);
                p
            }
            Curve::PiecewiseLine { orientation, knots } => {
                let lengths: Vec<f64> = knots.windows(2).map(|w| w[0].distance(w[1])).collect();
                let total: f64 = lengths.iter().sum();
                if total <= 0.0 {
                    return Pose { position: knots[0], orientation: *orientation };
                }
                let mut rest = s.clamp(0.0, 1.0) * total;
                for (i, l) in lengths.iter().enumerate() {
                    if rest <= *l || i + 1 == lengths.len() {
                        let f = if *l > 0.0 { (rest / l).min(1.0) } else { 0.0 };
                        let p = knots[i] + (knots[i + 1] - knots[i]) * f;
                        return Pose { position: p, orientation: *orientation };
                    }
                    rest -= l;
                }
                unreachable!("loop returns on the last segment")
            }
        }
    }

    pub fn sample(&self, count: usize) -> Vec<Pose> {
        let count = count.max(2);
        (0..count).map(|k| self.pose_at(k as f64 / (count - 1) as f64)).collect()
    }

    pub fn end(&self) -> Pose {
        self.pose_at(1.0)
    }

    pub fn path_length(&self) -> f64 {
        match self {
            Curve::Line { length, .. } => length.abs(),
            Curve::Arc { start, center, axis, angle } => radius(start.position, *center, *axis) * angle.abs(),
            Curve::Screw { start, center, axis, angle, advance } => {
                (radius(start.position, *center, *axis) * angle).hypot(*advance)
            }
            Curve::PiecewiseLine { knots, .. } => knots.windows(2).map(|w| w[0].distance(w[1])).sum(),
        }
    }

    /// Distance from a point to the curve's path.
    pub fn distance_to(&self, p: Vec3) -> f64 {
        match self {
            Curve::Line { start, direction, length } => {
                let d = direction.try_normalize().unwrap_or(*direction);
                segment_distance(p, start.position, start.position + d * *length)
            }
            Curve::PiecewiseLine { knots, .. } => {
                knots.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
            }
            Curve::Arc { start, center, axis, angle } => {
                let a = axis.try_normalize().unwrap_or(*axis);
                let r = radius(start.position, *center, a);
                let d = p - *center;
                let axial = d.dot(a) - (start.position - *center).dot(a);
                let radial = (d - a * d.dot(a)).norm() - r;
                let circle = radial.hypot(axial);
                let ends = p.distance(start.position).min(p.distance(self.end().position));
                let theta = in_plane_angle(start.position, *center, a, p);
                if within_sweep(theta, *angle) {
                    circle
                } else {
                    ends
                }
            }
            Curve::Screw { .. } => {
                let n = 400;
                self.sample(n).iter().map(|q| q.position.distance(p)).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn radius(start: Vec3, center: Vec3, axis: Vec3) -> f64 {
    let a = axis.try_normalize().unwrap_or(axis);
    let d = start - center;
    (d - a * d.dot(a)).norm()
}

fn in_plane_angle(start: Vec3, center: Vec3, a: Vec3, p: Vec3) -> f64 {
    let flat = |v: Vec3| v - a * v.dot(a);
    let u = flat(start - center).try_normalize().unwrap_or_else(|| a.any_orthogonal());
    let v = a.cross(u);
    let d = flat(p - center);
    d.dot(v).atan2(d.dot(u))
}

fn within_sweep(theta: f64, sweep: f64) -> bool {
    use std::f64::consts::TAU;
    let t = if sweep >= 0.0 { theta.rem_euclid(TAU) } else { -(-theta).rem_euclid(TAU) };
    if sweep >= 0.0 {
        t <= sweep + 1e-12
    } else {
        t >= sweep - 1e-12
    }
}

pub(crate) fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Which box extent a program's lengths are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Axis(usize),
    PerAxis,
}

/// Parameters normalized against the master box: positions in `[-0.5, 0.5]`
/// box coordinates, directions and orientations in the box frame, lengths
/// in units of the anchor extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NormalizedParams {
    Line { start: Vec3, orientation: Quat, direction: Vec3, length: f64 },
    Arc { center: Vec3, axis: Vec3, start_dir: Vec3, radius: f64, axial: f64, orientation: Quat, angle: f64 },
    Screw { center: Vec3, axis: Vec3, start_dir: Vec3, radius: f64, axial: f64, orientation: Quat, angle: f64, advance: f64 },
    PiecewiseLine { knots: Vec<Vec3>, orientation: Quat },
}

impl NormalizedParams {
    pub fn to_vector(&self) -> Vec<f64> {
        let q = |q: &Quat| {
            let c = q.canonical();
            [c.w, c.x, c.y, c.z]
        };
        let mut v = Vec::new();
        match self {
            NormalizedParams::Line { start, orientation, direction, length } => {
                v.extend(start.to_array());
                v.extend(q(orientation));
                v.extend(direction.to_array());
                v.push(*length);
            }
            NormalizedParams::Arc { center, axis, start_dir, radius, axial, orientation, angle } => {
                v.extend(center.to_array());
                v.extend(axis.to_array());
                v.extend(start_dir.to_array());
                v.extend([*radius, *axial, *angle]);
                v.extend(q(orientation));
            }
            NormalizedParams::Screw { center, axis, start_dir, radius, axial, orientation, angle, advance } => {
                v.extend(center.to_array());
                v.extend(axis.to_array());
                v.extend(start_dir.to_array());
                v.extend([*radius, *axial, *angle, *advance]);
                v.extend(q(orientation));
            }
            NormalizedParams::PiecewiseLine { knots, orientation } => {
                for k in knots {
                    v.extend(k.to_array());
                }
                v.extend(q(orientation));
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProgram {
    pub primitive: Primitive,
    pub trajectory_class: String,
    pub params: NormalizedParams,
    pub waypoint_count: usize,
    pub anchor: Anchor,
    /// RMS distance from the fitted demonstration points to the curve (m).
    pub residual_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

struct BoxFrame<'a>(&'a ObjectProperties);

impl BoxFrame<'_> {
    fn point_in(&self, p: Vec3) -> Vec3 {
        self.0.normalize(p)
    }
    fn point_out(&self, n: Vec3) -> Vec3 {
        self.0.denormalize(n)
    }
    fn dir_in(&self, d: Vec3) -> Vec3 {
        self.0.box_rotation().conjugate().rotate(d)
    }
    fn dir_out(&self, d: Vec3) -> Vec3 {
        self.0.box_rotation().rotate(d)
    }
    fn rot_in(&self, q: Quat) -> Quat {
        self.0.box_rotation().conjugate().mul_quat(q)
    }
    fn rot_out(&self, q: Quat) -> Quat {
        self.0.box_rotation().mul_quat(q)
    }
    fn extent(&self, axis: usize) -> f64 {
        self.0.bbox_extents[axis]
    }
}

fn unit(v: Vec3) -> Result<Vec3, LearnError> {
    v.try_normalize().ok_or_else(|| LearnError::DegenerateFit("zero-length direction".into()))
}

impl TrajectoryProgram {
    /// Normalizes a metric curve against the master box.
    pub fn from_curve(
        curve: &Curve,
        master: &ObjectProperties,
        trajectory_class: &str,
        waypoint_count: usize,
        residual_m: f64,
    ) -> Result<Self, LearnError> {
        curve.validate().map_err(LearnError::DegenerateFit)?;
        let b = BoxFrame(master);
        let arc_parts = |start: &Pose, center: Vec3, axis: Vec3| -> Result<(Vec3, Vec3, f64, f64, usize), LearnError> {
            let a = unit(axis)?;
            let d = start.position - center;
            let axial = d.dot(a);
            let radial = d - a * axial;
            let r = radial.norm();
            let u = unit(radial)?;
            let a_box = b.dir_in(a);
            let u_box = b.dir_in(u);
            let anchor = u_box.argmax_abs();
            Ok((a_box, u_box, r, axial, anchor))
        };
        let (params, anchor) = match curve {
            Curve::Line { start, direction, length } => {
                let d = b.dir_in(unit(*direction)?);
                let anchor = d.argmax_abs();
                (
                    NormalizedParams::Line {
                        start: b.point_in(start.position),
                        orientation: b.rot_in(start.orientation),
                        direction: d,
                        length: length / b.extent(anchor),
                    },
                    Anchor::Axis(anchor),
                )
            }
            Curve::Arc { start, center, axis, angle } => {
                let (a, u, r, axial, anchor) = arc_parts(start, *center, *axis)?;
                let e = b.extent(anchor);
                (
                    NormalizedParams::Arc {
                        center: b.point_in(*center),
                        axis: a,
                        start_dir: u,
                        radius: r / e,
                        axial: axial / e,
                        orientation: b.rot_in(start.orientation),
                        angle: *angle,
                    },
                    Anchor::Axis(anchor),
                )
            }
            Curve::Screw { start, center, axis, angle, advance } => {
                let (a, u, r, axial, anchor) = arc_parts(start, *center, *axis)?;
                let e = b.extent(anchor);
                (
                    NormalizedParams::Screw {
                        center: b.point_in(*center),
                        axis: a,
                        start_dir: u,
                        radius: r / e,
                        axial: axial / e,
                        orientation: b.rot_in(start.orientation),
                        angle: *angle,
                        advance: advance / e,
                    },
                    Anchor::Axis(anchor),
                )
            }
            Curve::PiecewiseLine { orientation, knots } => (
                NormalizedParams::PiecewiseLine {
                    knots: knots.iter().map(|k| b.point_in(*k)).collect(),
                    orientation: b.rot_in(*orientation),
                },
                Anchor::PerAxis,
            ),
        };
        let warning = (residual_m > super::FIT_WARNING_M)
            .then(|| format!("fit residual {residual_m:.4} m exceeds {} m", super::FIT_WARNING_M));
        Ok(Self {
            primitive: curve.primitive(),
            trajectory_class: trajectory_class.to_string(),
            params,
            waypoint_count: waypoint_count.max(2),
            anchor,
            residual_m,
            warning,
        })
    }

    /// Parameter estimation: the metric curve for a given master box.
    pub fn curve(&self, master: &ObjectProperties) -> Result<Curve, LearnError> {
        let b = BoxFrame(master);
        let anchor_extent = match self.anchor {
            Anchor::Axis(i) if i < 3 => b.extent(i),
            Anchor::Axis(i) => return Err(LearnError::Evaluation(format!("anchor axis {i} out of range"))),
            Anchor::PerAxis => 1.0,
        };
        let curve = match &self.params {
            NormalizedParams::Line { start, orientation, direction, length } => Curve::Line {
                start: Pose { position: b.point_out(*start), orientation: b.rot_out(*orientation) },
                direction: b.dir_out(*direction),
                length: length * anchor_extent,
            },
            NormalizedParams::Arc { center, axis, start_dir, radius, axial, orientation, angle } => {
                let c = b.point_out(*center);
                let a = b.dir_out(*axis);
                let p = c + b.dir_out(*start_dir) * (radius * anchor_extent) + a * (axial * anchor_extent);
                Curve::Arc { start: Pose { position: p, orientation: b.rot_out(*orientation) }, center: c, axis: a, angle: *angle }
            }
            NormalizedParams::Screw { center, axis, start_dir, radius, axial, orientation, angle, advance } => {
                let c = b.point_out(*center);
                let a = b.dir_out(*axis);
                let p = c + b.dir_out(*start_dir) * (radius * anchor_extent) + a * (axial * anchor_extent);
                Curve::Screw {
                    start: Pose { position: p, orientation: b.rot_out(*orientation) },
                    center: c,
                    axis: a,
                    angle: *angle,
                    advance: advance * anchor_extent,
                }
            }
            NormalizedParams::PiecewiseLine { knots, orientation } => Curve::PiecewiseLine {
                orientation: b.rot_out(*orientation),
                knots: knots.iter().map(|k| b.point_out(*k)).collect(),
            },
        };
        let finite = match &curve {
            Curve::Line { start, direction, length } => start.is_finite() && direction.is_finite() && length.is_finite(),
            Curve::Arc { start, center, axis, angle } => {
                start.is_finite() && center.is_finite() && axis.is_finite() && angle.is_finite()
            }
            Curve::Screw { start, center, axis, angle, advance } => {
                start.is_finite() && center.is_finite() && axis.is_finite() && angle.is_finite() && advance.is_finite()
            }
            Curve::PiecewiseLine { orientation, knots } => orientation.is_finite() && knots.iter().all(|k| k.is_finite()),
        };
        if !finite {
            return Err(LearnError::Evaluation("non-finite parameters".into()));
        }
        Ok(curve)
    }

    /// Trajectory generation: `waypoint_count` slave poses in the master frame.
    pub fn evaluate(&self, master: &ObjectProperties) -> Result<Vec<Pose>, LearnError> {
        Ok(self.curve(master)?.sample(self.waypoint_count))
    }

    pub fn parameter_vector(&self) -> Vec<f64> {
        self.params.to_vector()
    }
}
