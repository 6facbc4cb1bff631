//! Kinematic desk-scale world: object poses, articulation constraints,
//! gripper state, box obstacles and the task success predicate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{ObjectProperties, Pose, Quat, Vec3};

/// Axis-aligned box in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn new(lo: Vec3, hi: Vec3) -> Self {
        Self { lo: lo.component_min(hi), hi: lo.component_max(hi) }
    }

    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self::new(center - half, center + half)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    /// Slab test for the closed segment `a -> b`.
    pub fn intersects_segment(&self, a: Vec3, b: Vec3) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < self.lo[i] || a[i] > self.hi[i] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut ta, mut tb) = ((self.lo[i] - a[i]) * inv, (self.hi[i] - a[i]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kinematic {
    /// Never moves.
    Fixed,
    /// Follows the gripper rigidly when held.
    Free,
    /// Rotates about `axis` through `origin` (world frame); positive angles open.
    Hinged { axis: Vec3, origin: Vec3, range: (f64, f64) },
    /// Translates along `axis` (world frame); positive coordinates open.
    Prismatic { axis: Vec3, range: (f64, f64) },
}

impl Kinematic {
    pub fn range(&self) -> Option<(f64, f64)> {
        match self {
            Kinematic::Hinged { range, .. } | Kinematic::Prismatic { range, .. } => Some(*range),
            _ => None,
        }
    }
}

/// Ground-truth region where a grasp on an object succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSite {
    pub part: String,
    /// Box in the object frame, meters.
    pub lo: Vec3,
    pub hi: Vec3,
    /// Gripper orientation in the object frame (z axis = approach direction).
    pub orientation: Quat,
}

impl GraspSite {
    /// Distance from an object-frame point to the site box.
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let g = (self.lo[i] - p[i]).max(p[i] - self.hi[i]).max(0.0);
            d2 += g * g;
        }
        d2.sqrt()
    }

    /// Orientation error, treating the two-finger gripper as symmetric under a
    /// half turn about its approach axis.
    pub fn angle_error(&self, q: Quat) -> f64 {
        let flipped = q.mul_quat(Quat::from_axis_angle(Vec3::unit(2), std::f64::consts::PI));
        q.angle_to(self.orientation).min(flipped.angle_to(self.orientation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub pose: Pose,
    /// Box, cloud and parts in the object frame.
    pub props: ObjectProperties,
    pub kinematic: Kinematic,
    /// Joint coordinate for articulated objects (m or rad).
    #[serde(default)]
    pub joint: f64,
    /// Pose at joint coordinate zero.
    pub rest_pose: Pose,
    #[serde(default)]
    pub grasp_sites: Vec<GraspSite>,
    /// Surfaces record how much of their width a held tool swept across.
    #[serde(default)]
    pub wipeable: bool,
}

impl WorldObject {
    pub fn new(pose: Pose, props: ObjectProperties, kinematic: Kinematic) -> Self {
        Self { pose, props, kinematic, joint: 0.0, rest_pose: pose, grasp_sites: Vec::new(), wipeable: false }
    }

    /// Pose for a joint coordinate, clamped to the joint range.
    pub fn pose_at(&self, q: f64) -> (f64, Pose) {
        match &self.kinematic {
            Kinematic::Hinged { axis, origin, range } => {
                let q = q.clamp(range.0, range.1);
                let rot = Pose::rotation_about(*origin, Quat::from_axis_angle(*axis, q));
                (q, rot.mul_pose(&self.rest_pose))
            }
            Kinematic::Prismatic { axis, range } => {
                let q = q.clamp(range.0, range.1);
                let shift = Pose::from_translation(axis.try_normalize().unwrap_or(*axis) * q);
                (q, shift.mul_pose(&self.rest_pose))
            }
            _ => (0.0, self.pose),
        }
    }

    pub fn set_joint(&mut self, q: f64) {
        let (q, pose) = self.pose_at(q);
        self.joint = q;
        self.pose = pose;
    }

    /// Joint coordinate best matching a desired object position.
    pub fn project_joint(&self, desired: Vec3) -> Option<f64> {
        match &self.kinematic {
            Kinematic::Prismatic { axis, .. } => {
                let a = axis.try_normalize()?;
                Some((desired - self.rest_pose.position).dot(a))
            }
            Kinematic::Hinged { axis, origin, .. } => {
                let a = axis.try_normalize()?;
                let flat = |v: Vec3| v - a * v.dot(a);
                let r0 = flat(self.rest_pose.position - *origin);
                let r1 = flat(desired - *origin);
                if r0.norm() < 1e-9 || r1.norm() < 1e-9 {
                    return Some(self.joint);
                }
                Some(r0.cross(r1).dot(a).atan2(r0.dot(r1)))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pose: Pose,
    pub closed: bool,
    pub held_object: Option<String>,
    /// Gripper pose in the held object's frame.
    pub grasp_in_object: Option<Pose>,
}

/// Task success predicate, decidable from the world state alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Goal {
    /// Joint coordinate at least `fraction` of the upper range limit.
    JointOpened { object: String, fraction: f64 },
    /// Object center inside the container footprint and below its rim plus `slack`.
    PlacedIn { object: String, container: String, slack: f64 },
    /// Swept span across the surface width (normalized) at least `min_span`.
    Wiped { surface: String, min_span: f64 },
    /// Vessel tilted at least `min_tilt` rad with its mouth over the target.
    Poured { vessel: String, target: String, min_tilt: f64, mouth: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, WorldObject>,
    pub gripper: Gripper,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    /// Swept normalized x-span per wipeable surface.
    #[serde(default)]
    pub wiped: BTreeMap<String, (f64, f64)>,
    pub goal: Option<Goal>,
}

impl WorldState {
    pub fn object(&self, id: &str) -> Option<&WorldObject> {
        self.objects.get(id)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(id) = &self.gripper.held_object {
            if !self.objects.contains_key(id) {
                return Err(format!("held object '{id}' not in world"));
            }
        }
        Ok(())
    }

    /// Moves the gripper; a held object follows within its kinematic constraint
    /// and the gripper is pulled back onto the object when the constraint binds.
    pub fn move_gripper(&mut self, target: Pose) {
        let (Some(id), Some(grasp)) = (self.gripper.held_object.clone(), self.gripper.grasp_in_object) else {
            self.gripper.pose = target;
            return;
        };
        let desired = target.mul_pose(&grasp.inverse());
        let obj = self.objects.get_mut(&id).expect("held object exists");
        match obj.kinematic {
            Kinematic::Fixed => {}
            Kinematic::Free => obj.pose = desired,
            Kinematic::Hinged { .. } | Kinematic::Prismatic { .. } => {
                if let Some(q) = obj.project_joint(desired.position) {
                    obj.set_joint(q);
                }
            }
        }
        self.gripper.pose = obj.pose.mul_pose(&grasp);
        self.record_wipe(&id);
    }

    fn record_wipe(&mut self, tool: &str) {
        let tool_obj = &self.objects[tool];
        let bottom = tool_obj.pose.transform_point(Vec3::new(0.0, 0.0, -tool_obj.props.bbox_extents.z * 0.5));
        let mut updates = Vec::new();
        for (id, surf) in &self.objects {
            if !surf.wipeable || id == tool {
                continue;
            }
            let local = surf.pose.inverse().transform_point(bottom);
            let n = surf.props.normalize(local);
            let top = surf.props.bbox_extents.z * 0.5;
            let above = local.z - (surf.props.bbox_center.position.z + top);
            if above.abs() <= 0.01 && n.x.abs() <= 0.5 && n.y.abs() <= 0.5 {
                updates.push((id.clone(), n.x));
            }
        }
        for (id, x) in updates {
            let span = self.wiped.entry(id).or_insert((x, x));
            span.0 = span.0.min(x);
            span.1 = span.1.max(x);
        }
    }

    /// Closes the gripper on `object` if given, otherwise on empty space.
    pub fn close_gripper(&mut self, object: Option<&str>) {
        self.gripper.closed = true;
        if let Some(id) = object {
            let obj = &self.objects[id];
            self.gripper.grasp_in_object = Some(obj.pose.inverse().mul_pose(&self.gripper.pose));
            self.gripper.held_object = Some(id.to_string());
        }
    }

    pub fn open_gripper(&mut self) {
        self.gripper.closed = false;
        self.gripper.held_object = None;
        self.gripper.grasp_in_object = None;
    }

    /// Object id whose grasp site the gripper pose falls within.
    pub fn grasp_target(&self, gripper: &Pose, pos_tol: f64, ang_tol: f64) -> Option<String> {
        self.objects.iter().find_map(|(id, obj)| {
            let local = obj.pose.inverse().mul_pose(gripper);
            obj.grasp_sites
                .iter()
                .any(|s| s.distance(local.position) <= pos_tol && s.angle_error(local.orientation) <= ang_tol)
                .then(|| id.clone())
        })
    }

    pub fn judge(&self) -> bool {
        let Some(goal) = &self.goal else { return false };
        match goal {
            Goal::JointOpened { object, fraction } => self.objects.get(object).is_some_and(|o| {
                o.kinematic.range().is_some_and(|(_, hi)| o.joint >= fraction * hi - 1e-12)
            }),
            Goal::PlacedIn { object, container, slack } => {
                let (Some(o), Some(c)) = (self.objects.get(object), self.objects.get(container)) else {
                    return false;
                };
                let local = c.pose.inverse().transform_point(o.pose.position);
                let n = c.props.normalize(local);
                let rim = c.props.bbox_center.position.z + c.props.bbox_extents.z * 0.5;
                n.x.abs() <= 0.5 && n.y.abs() <= 0.5 && local.z <= rim + slack && n.z >= -0.5
            }
            Goal::Wiped { surface, min_span } => {
                self.wiped.get(surface).is_some_and(|(lo, hi)| hi - lo >= *min_span)
            }
            Goal::Poured { vessel, target, min_tilt, mouth } => {
                let (Some(v), Some(t)) = (self.objects.get(vessel), self.objects.get(target)) else {
                    return false;
                };
                let up = v.pose.transform_vector(Vec3::unit(2));
                let tilt = up.z.clamp(-1.0, 1.0).acos();
                let mouth_world = v.pose.transform_point(*mouth);
                let n = t.props.normalize(t.pose.inverse().transform_point(mouth_world));
                tilt >= *min_tilt && n.x.abs() <= 0.5 && n.y.abs() <= 0.5 && n.z >= -0.5
            }
        }
    }
}
