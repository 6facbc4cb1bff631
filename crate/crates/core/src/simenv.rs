//! Synthetic scene templates: demonstration traces with ground truth, and
//! kinematic worlds to execute learned skills in.
//!
//! Every template is a two-stage task: reach and grasp one object, then move
//! a slave object relative to a master object. Scenes are laid out in a local
//! frame and placed on the desk by a random root pose, so demonstrations
//! differ in viewpoint as well as object dimensions.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grounding::Phase;
use crate::trace::{Frame, PerceptionTrace};
use crate::world::{Aabb, Goal, GraspSite, Gripper, Kinematic, WorldObject, WorldState};
use crate::{compute_bbox, ObjectProperties, Part, PointCloud, Pose, Quat, Vec3, HAND, WORLD_FRAME};

pub const DEMO_FPS: f64 = 30.0;
const APPROACH_FRAMES: usize = 20;
const APPROACH_DISTANCE: f64 = 0.36;
const GRASP_DWELL: usize = 2;
const MANIP_FRAMES: usize = 40;
const RELEASE_DWELL: usize = 2;
const RETREAT_FRAMES: usize = 10;
const RETREAT_STEP: f64 = 0.018;
const BODY_SPACING: f64 = 0.025;
const PART_SPACING: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoorVariant {
    Microwave,
    Oven,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    Drawer,
    HingedDoor(DoorVariant),
    PickPlace,
    WipeLine,
    PourArc,
}

impl TemplateId {
    /// The five templates used by the default evaluation.
    pub const DEFAULT_SET: [TemplateId; 5] = [
        TemplateId::Drawer,
        TemplateId::HingedDoor(DoorVariant::Microwave),
        TemplateId::PickPlace,
        TemplateId::WipeLine,
        TemplateId::PourArc,
    ];

    pub const NAMES: [&'static str; 7] =
        ["drawer", "hinged-door", "hinged-door:oven", "hinged-door:box", "pick-place", "wipe-line", "pour-arc"];

    pub fn index(self) -> u64 {
        match self {
            TemplateId::Drawer => 1,
            TemplateId::HingedDoor(DoorVariant::Microwave) => 2,
            TemplateId::HingedDoor(DoorVariant::Oven) => 3,
            TemplateId::HingedDoor(DoorVariant::Box) => 4,
            TemplateId::PickPlace => 5,
            TemplateId::WipeLine => 6,
            TemplateId::PourArc => 7,
        }
    }

    /// Instruction a demonstrator would be given for this template.
    pub fn task_text(self) -> &'static str {
        match self {
            TemplateId::Drawer => "open the drawer",
            TemplateId::HingedDoor(DoorVariant::Microwave) => "open the microwave door",
            TemplateId::HingedDoor(DoorVariant::Oven) => "open the oven door",
            TemplateId::HingedDoor(DoorVariant::Box) => "open the box lid",
            TemplateId::PickPlace => "put the block in the tray",
            TemplateId::WipeLine => "wipe the board with the sponge",
            TemplateId::PourArc => "pour the cup into the bowl",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateId::Drawer => "drawer",
            TemplateId::HingedDoor(DoorVariant::Microwave) => "hinged-door",
            TemplateId::HingedDoor(DoorVariant::Oven) => "hinged-door:oven",
            TemplateId::HingedDoor(DoorVariant::Box) => "hinged-door:box",
            TemplateId::PickPlace => "pick-place",
            TemplateId::WipeLine => "wipe-line",
            TemplateId::PourArc => "pour-arc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown template '{0}'; valid templates: {valid}", valid = TemplateId::NAMES.join(", "))]
pub struct UnknownTemplate(pub String);

impl FromStr for TemplateId {
    type Err = UnknownTemplate;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "drawer" => TemplateId::Drawer,
            "hinged-door" | "hinged-door:microwave" => TemplateId::HingedDoor(DoorVariant::Microwave),
            "hinged-door:oven" => TemplateId::HingedDoor(DoorVariant::Oven),
            "hinged-door:box" => TemplateId::HingedDoor(DoorVariant::Box),
            "pick-place" => TemplateId::PickPlace,
            "wipe-line" => TemplateId::WipeLine,
            "pour-arc" => TemplateId::PourArc,
            other => return Err(UnknownTemplate(other.to_string())),
        })
    }
}

/// Seen scenes reuse the demonstration distribution; unseen scenes re-sample
/// dimensions by up to ±50%, mirror sites and axes, and add distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    #[default]
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub pose_sigma_m: f64,
    pub cloud_sigma_m: f64,
}

/// Geometry of one object, in its own frame (origin at the body center).
#[derive(Debug, Clone)]
struct ObjectModel {
    id: String,
    half: Vec3,
    parts: Vec<Part>,
    sites: Vec<GraspSite>,
    kinematic_local: Kinematic,
    rest_local: Pose,
    wipeable: bool,
    open_top: bool,
}

impl ObjectModel {
    fn new(id: &str, half: Vec3, rest_local: Pose, kinematic_local: Kinematic) -> Self {
        Self { id: id.into(), half, parts: vec![], sites: vec![], kinematic_local, rest_local, wipeable: false, open_top: false }
    }

    fn cloud(&self) -> PointCloud {
        let top = self.half.z - 1e-9;
        let mut pts: Vec<Vec3> = box_surface(-self.half, self.half, BODY_SPACING)
            .into_iter()
            .filter(|p| !(self.open_top && p.z >= top && p.x.abs() < self.half.x - 1e-9 && p.y.abs() < self.half.y - 1e-9))
            .collect();
        for p in &self.parts {
            pts.extend(box_surface(p.lo, p.hi, PART_SPACING));
        }
        PointCloud::new(pts, self.id.clone())
    }

    fn properties(&self) -> ObjectProperties {
        let mut props = compute_bbox(&self.id, &self.cloud()).expect("model cloud non-empty");
        props.parts = self.parts.clone();
        props
    }
}

fn box_surface(lo: Vec3, hi: Vec3, spacing: f64) -> Vec<Vec3> {
    let counts: Vec<usize> = (0..3).map(|i| (((hi[i] - lo[i]) / spacing).ceil() as usize).max(1) + 1).collect();
    let coord = |i: usize, k: usize| lo[i] + (hi[i] - lo[i]) * k as f64 / (counts[i] - 1) as f64;
    let mut out = Vec::new();
    for a in 0..counts[0] {
        for b in 0..counts[1] {
            for c in 0..counts[2] {
                let on_surface = a == 0 || a + 1 == counts[0] || b == 0 || b + 1 == counts[1] || c == 0 || c + 1 == counts[2];
                if on_surface {
                    out.push(Vec3::new(coord(0, a), coord(1, b), coord(2, c)));
                }
            }
        }
    }
    out
}

/// Gripper orientation with z along `approach` and x along `jaw` (made orthogonal).
pub fn approach_frame(approach: Vec3, jaw: Vec3) -> Quat {
    let z = approach.try_normalize().expect("non-zero approach");
    let x = (jaw - z * jaw.dot(z)).try_normalize().unwrap_or_else(|| z.any_orthogonal());
    Quat::from_basis(x, z.cross(x), z)
}

/// The demonstrator's hand: 20 points behind the contact point along the
/// approach axis, in the hand frame.
pub fn hand_model() -> Vec<Vec3> {
    let mut pts = vec![Vec3::zero()];
    for (n, r, d) in [(6usize, 0.015, 0.01), (7, 0.02, 0.03), (6, 0.01, 0.05)] {
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64;
            pts.push(Vec3::new(r * a.cos(), r * a.sin(), -d));
        }
    }
    pts
}

#[derive(Debug, Clone)]
enum Motion {
    /// Drive the slave's joint from 0 to `q_end`.
    Joint { q_end: f64 },
    /// Constant-orientation polyline through world points, uniform in arc length.
    Polyline(Vec<Vec3>),
    /// Rigid rotation of the slave about a world axis through `origin`.
    Rotate { origin: Vec3, axis: Vec3, angle: f64 },
}

/// Fully specified scene in the world frame.
#[derive(Debug, Clone)]
struct Scene {
    objects: Vec<ObjectModel>,
    root: Pose,
    grasp_object: String,
    master: String,
    slave: String,
    /// Grasp point jitter range for demonstrations, in the grasped object's frame.
    grasp_center: Vec3,
    grasp_jitter: Vec3,
    motion: Motion,
    goal: Goal,
    distractors: Vec<Aabb>,
}

struct Dims<'a, R: Rng> {
    rng: &'a mut R,
    spread: f64,
}

impl<R: Rng> Dims<'_, R> {
    fn scale(&mut self, v: f64) -> f64 {
        v * (1.0 + self.rng.gen_range(-self.spread..=self.spread))
    }
}

fn part(name: &str, a: Vec3, b: Vec3) -> Part {
    Part { name: name.into(), lo: a.component_min(b), hi: a.component_max(b) }
}

fn site(part: &str, a: Vec3, b: Vec3, orientation: Quat) -> GraspSite {
    GraspSite { part: part.into(), lo: a.component_min(b), hi: a.component_max(b), orientation }
}

fn build_scene(template: TemplateId, seed: u64, env: Environment) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ template.index() << 56);
    let spread = match env {
        Environment::Seen => 0.1,
        Environment::Unseen => 0.5,
    };
    let mirrored = env == Environment::Unseen && rng.gen_bool(0.5);
    let yaw = rng.gen_range(-0.4..0.4);
    let root = Pose::new(
        Vec3::new(rng.gen_range(0.45..0.6), rng.gen_range(-0.1..0.1), 0.0),
        Quat::from_axis_angle(Vec3::unit(2), yaw),
    )
    .expect("finite root");
    let mut dims = Dims { rng: &mut rng, spread };
    let mut scene = match template {
        TemplateId::Drawer => drawer_scene(&mut dims, mirrored),
        TemplateId::HingedDoor(v) => door_scene(&mut dims, v, mirrored),
        TemplateId::PickPlace => pick_scene(&mut dims, mirrored),
        TemplateId::WipeLine => wipe_scene(&mut dims, mirrored),
        TemplateId::PourArc => pour_scene(&mut dims, mirrored),
    };
    scene.root = root;
    scene.place(root);
    if env == Environment::Unseen {
        let count = rng.gen_range(1..=2);
        for _ in 0..count {
            let a = rng.gen_range(0.0..2.0 * PI);
            let r = rng.gen_range(0.95..1.15);
            let c = root.transform_point(Vec3::new(r * a.cos(), r * a.sin(), 0.08));
            scene.distractors.push(Aabb::from_center(c, Vec3::new(0.04, 0.04, 0.08)));
        }
    }
    scene
}

impl Scene {
    /// Moves every local-frame quantity into the world frame.
    fn place(&mut self, root: Pose) {
        for obj in &mut self.objects {
            obj.rest_local = root.mul_pose(&obj.rest_local);
            obj.kinematic_local = match &obj.kinematic_local {
                Kinematic::Hinged { axis, origin, range } => Kinematic::Hinged {
                    axis: root.transform_vector(*axis),
                    origin: root.transform_point(*origin),
                    range: *range,
                },
                Kinematic::Prismatic { axis, range } => {
                    Kinematic::Prismatic { axis: root.transform_vector(*axis), range: *range }
                }
                k => k.clone(),
            };
        }
        self.motion = match &self.motion {
            Motion::Polyline(pts) => Motion::Polyline(pts.iter().map(|p| root.transform_point(*p)).collect()),
            Motion::Rotate { origin, axis, angle } => Motion::Rotate {
                origin: root.transform_point(*origin),
                axis: root.transform_vector(*axis),
                angle: *angle,
            },
            m => m.clone(),
        };
    }

    fn model(&self, id: &str) -> &ObjectModel {
        self.objects.iter().find(|o| o.id == id).expect("object in scene")
    }

    fn world(&self) -> WorldState {
        let objects = self
            .objects
            .iter()
            .map(|m| {
                let mut obj = WorldObject::new(m.rest_local, m.properties(), m.kinematic_local.clone());
                obj.grasp_sites = m.sites.clone();
                obj.wipeable = m.wipeable;
                (m.id.clone(), obj)
            })
            .collect();
        WorldState {
            objects,
            gripper: Gripper {
                pose: self.root.mul_pose(&Pose::new(
                    Vec3::new(-0.35, 0.0, 0.45),
                    approach_frame(-Vec3::unit(2), Vec3::unit(0)),
                ).expect("finite")),
                closed: false,
                held_object: None,
                grasp_in_object: None,
            },
            obstacles: self.distractors.clone(),
            wiped: BTreeMap::new(),
            goal: Some(self.goal.clone()),
        }
    }

    /// Slave world pose at progress `s` in `[0, 1]`.
    fn slave_pose(&self, world: &WorldState, s: f64) -> Pose {
        let obj = &world.objects[&self.slave];
        match &self.motion {
            Motion::Joint { q_end } => obj.pose_at(q_end * s).1,
            Motion::Polyline(pts) => {
                let lengths: Vec<f64> = pts.windows(2).map(|w| w[0].distance(w[1])).collect();
                let total: f64 = lengths.iter().sum();
                let mut target = s * total;
                let mut pos = *pts.last().unwrap();
                for (i, l) in lengths.iter().enumerate() {
                    if target <= *l || i + 1 == lengths.len() {
                        let f = if *l > 0.0 { (target / l).min(1.0) } else { 0.0 };
                        pos = pts[i] + (pts[i + 1] - pts[i]) * f;
                        break;
                    }
                    target -= l;
                }
                Pose { position: pos, orientation: obj.rest_pose.orientation }
            }
            Motion::Rotate { origin, axis, angle } => {
                Pose::rotation_about(*origin, Quat::from_axis_angle(*axis, angle * s)).mul_pose(&obj.rest_pose)
            }
        }
    }
}

fn drawer_scene<R: Rng>(d: &mut Dims<R>, mirrored: bool) -> Scene {
    let (w, dep, h) = (d.scale(0.4), d.scale(0.34), d.scale(0.3));
    let f = if mirrored { 1.0 } else { -1.0 };
    let cabinet = ObjectModel::new(
        "cabinet",
        Vec3::new(w / 2.0, dep / 2.0, h / 2.0),
        Pose::from_translation(Vec3::new(0.0, 0.0, h / 2.0)),
        Kinematic::Fixed,
    );
    let (dw, dd, dh) = (0.8 * w, 0.9 * dep, 0.35 * h);
    let center = Vec3::new(0.0, f * (dep / 2.0 - dd / 2.0), 0.6 * h);
    let range = 0.6 * dd;
    let mut drawer = ObjectModel::new(
        "drawer",
        Vec3::new(dw / 2.0, dd / 2.0, dh / 2.0),
        Pose::from_translation(center),
        Kinematic::Prismatic { axis: Vec3::new(0.0, f, 0.0), range: (0.0, range) },
    );
    let front = f * dd / 2.0;
    let outer = f * (dd / 2.0 + 0.03);
    drawer.parts.push(part("handle", Vec3::new(-0.25 * dw, front, -0.01), Vec3::new(0.25 * dw, outer, 0.01)));
    let q = approach_frame(Vec3::new(0.0, -f, 0.0), Vec3::unit(2));
    drawer.sites.push(site("handle", Vec3::new(-0.25 * dw, outer, -0.01), Vec3::new(0.25 * dw, front, 0.01), q));
    Scene {
        objects: vec![cabinet, drawer],
        root: Pose::identity(),
        grasp_object: "drawer".into(),
        master: "cabinet".into(),
        slave: "drawer".into(),
        grasp_center: Vec3::new(0.0, outer, 0.0),
        grasp_jitter: Vec3::new(0.15 * dw, 0.0, 0.0),
        motion: Motion::Joint { q_end: range },
        goal: Goal::JointOpened { object: "drawer".into(), fraction: 0.8 },
        distractors: vec![],
    }
}

fn door_scene<R: Rng>(d: &mut Dims<R>, variant: DoorVariant, mirrored: bool) -> Scene {
    let (w, dep, h) = (d.scale(0.45), d.scale(0.33), d.scale(0.28));
    let (body_id, door_id) = match variant {
        DoorVariant::Microwave => ("microwave", "door"),
        DoorVariant::Oven => ("oven", "door"),
        DoorVariant::Box => ("box", "lid"),
    };
    let body = ObjectModel::new(
        body_id,
        Vec3::new(w / 2.0, dep / 2.0, h / 2.0),
        Pose::from_translation(Vec3::new(0.0, 0.0, h / 2.0)),
        Kinematic::Fixed,
    );
    let t = 0.02;
    // door slab half extents, door center, hinge origin, hinge axis, handle and site boxes
    let (half, center, origin, axis, handle, site_box, jaw, approach) = match variant {
        DoorVariant::Microwave => {
            let s = if mirrored { 1.0 } else { -1.0 };
            let half = Vec3::new(w / 2.0, t / 2.0, h / 2.0);
            let center = Vec3::new(0.0, -dep / 2.0 - t / 2.0, h / 2.0);
            let origin = Vec3::new(s * w / 2.0, center.y, 0.0);
            let hx = -s * (w / 2.0 - 0.04);
            let handle = (Vec3::new(hx - 0.015, -t / 2.0, -0.25 * h), Vec3::new(hx + 0.015, -t / 2.0 - 0.03, 0.25 * h));
            let edge = -s * w / 2.0;
            let site_box = (Vec3::new(edge, -t / 2.0 - 0.03, -0.35 * h), Vec3::new(edge + s * 0.4 * w, -t / 2.0, 0.35 * h));
            (half, center, origin, Vec3::new(0.0, 0.0, s), handle, site_box, Vec3::unit(0), Vec3::unit(1))
        }
        DoorVariant::Oven => {
            let half = Vec3::new(w / 2.0, t / 2.0, h / 2.0);
            let center = Vec3::new(0.0, -dep / 2.0 - t / 2.0, h / 2.0);
            let origin = Vec3::new(0.0, center.y, 0.0);
            let hz = h / 2.0 - 0.04;
            let handle = (Vec3::new(-0.3 * w, -t / 2.0, hz - 0.01), Vec3::new(0.3 * w, -t / 2.0 - 0.03, hz + 0.01));
            let site_box = (Vec3::new(-0.35 * w, -t / 2.0 - 0.03, h / 2.0), Vec3::new(0.35 * w, -t / 2.0, h / 2.0 - 0.4 * h));
            (half, center, origin, Vec3::unit(0), handle, site_box, Vec3::unit(2), Vec3::unit(1))
        }
        DoorVariant::Box => {
            let half = Vec3::new(w / 2.0, dep / 2.0, t / 2.0);
            let center = Vec3::new(0.0, 0.0, h + t / 2.0);
            let origin = Vec3::new(0.0, dep / 2.0, center.z);
            let hy = -dep / 2.0 + 0.04;
            let handle = (Vec3::new(-0.25 * w, hy - 0.01, t / 2.0), Vec3::new(0.25 * w, hy + 0.01, t / 2.0 + 0.03));
            let site_box = (Vec3::new(-0.3 * w, -dep / 2.0, t / 2.0), Vec3::new(0.3 * w, -dep / 2.0 + 0.4 * dep, t / 2.0 + 0.03));
            (half, center, origin, -Vec3::unit(0), handle, site_box, Vec3::unit(1), -Vec3::unit(2))
        }
    };
    let mut door = ObjectModel::new(
        door_id,
        half,
        Pose::from_translation(center),
        Kinematic::Hinged { axis, origin, range: (0.0, FRAC_PI_2) },
    );
    door.parts.push(part("handle", handle.0, handle.1));
    let q = approach_frame(approach, jaw);
    door.sites.push(site("handle", site_box.0, site_box.1, q));
    let hc = (handle.0 + handle.1) * 0.5;
    let outer = if approach.y > 0.5 { handle.0.y.min(handle.1.y) } else { handle.0.z.max(handle.1.z) };
    let (grasp_center, jitter) = match variant {
        DoorVariant::Box => (Vec3::new(hc.x, hc.y, outer), Vec3::new(0.15 * w, 0.0, 0.0)),
        DoorVariant::Oven => (Vec3::new(hc.x, outer, hc.z), Vec3::new(0.15 * w, 0.0, 0.0)),
        DoorVariant::Microwave => (Vec3::new(hc.x, outer, hc.z), Vec3::new(0.0, 0.0, 0.12 * h)),
    };
    Scene {
        objects: vec![body, door],
        root: Pose::identity(),
        grasp_object: door_id.into(),
        master: body_id.into(),
        slave: door_id.into(),
        grasp_center,
        grasp_jitter: jitter,
        motion: Motion::Joint { q_end: FRAC_PI_2 },
        goal: Goal::JointOpened { object: door_id.into(), fraction: 0.8 },
        distractors: vec![],
    }
}

fn pick_scene<R: Rng>(d: &mut Dims<R>, mirrored: bool) -> Scene {
    let (w, dep) = (d.scale(0.24), d.scale(0.18));
    let s = d.scale(0.05);
    let th = 0.04;
    let side = if mirrored { 1.0 } else { -1.0 };
    let offset_y = if mirrored { d.rng.gen_range(-0.05..0.05) } else { 0.0 };
    let mut tray = ObjectModel::new(
        "tray",
        Vec3::new(w / 2.0, dep / 2.0, th / 2.0),
        Pose::from_translation(Vec3::new(0.0, 0.0, th / 2.0)),
        Kinematic::Fixed,
    );
    tray.open_top = true;
    let start = Vec3::new(side * (w / 2.0 + 0.12), offset_y, s / 2.0);
    let mut block = ObjectModel::new("block", Vec3::splat(s / 2.0), Pose::from_translation(start), Kinematic::Free);
    block.parts.push(part("top", Vec3::new(-s / 2.0, -s / 2.0, s / 2.0), Vec3::new(s / 2.0, s / 2.0, s / 2.0)));
    let q = approach_frame(-Vec3::unit(2), Vec3::unit(0));
    block.sites.push(site("top", Vec3::new(-0.35 * s, -0.35 * s, s / 2.0), Vec3::new(0.35 * s, 0.35 * s, s / 2.0), q));
    let lift = 0.12;
    let place = Vec3::new(0.0, 0.0, s / 2.0 + 0.002);
    let path = vec![start, start + Vec3::new(0.0, 0.0, lift), place + Vec3::new(0.0, 0.0, lift), place];
    Scene {
        objects: vec![tray, block],
        root: Pose::identity(),
        grasp_object: "block".into(),
        master: "tray".into(),
        slave: "block".into(),
        grasp_center: Vec3::new(0.0, 0.0, s / 2.0),
        grasp_jitter: Vec3::new(0.25 * s, 0.25 * s, 0.0),
        motion: Motion::Polyline(path),
        goal: Goal::PlacedIn { object: "block".into(), container: "tray".into(), slack: s },
        distractors: vec![],
    }
}

fn wipe_scene<R: Rng>(d: &mut Dims<R>, mirrored: bool) -> Scene {
    let (w, dep) = (d.scale(0.45), d.scale(0.28));
    let th = 0.02;
    let side = if mirrored { 1.0 } else { -1.0 };
    let mut board = ObjectModel::new(
        "board",
        Vec3::new(w / 2.0, dep / 2.0, th / 2.0),
        Pose::from_translation(Vec3::new(0.0, 0.0, th / 2.0)),
        Kinematic::Fixed,
    );
    board.wipeable = true;
    let half = Vec3::new(0.04, 0.025, 0.015);
    let start = Vec3::new(side * 0.4 * w, 0.0, th + half.z);
    let mut sponge = ObjectModel::new("sponge", half, Pose::from_translation(start), Kinematic::Free);
    sponge.parts.push(part("top", Vec3::new(-half.x, -half.y, half.z), half));
    let q = approach_frame(-Vec3::unit(2), Vec3::unit(1));
    sponge.sites.push(site("top", Vec3::new(-0.6 * half.x, -0.6 * half.y, half.z), Vec3::new(0.6 * half.x, 0.6 * half.y, half.z), q));
    let end = Vec3::new(-side * 0.4 * w, 0.0, start.z);
    Scene {
        objects: vec![board, sponge],
        root: Pose::identity(),
        grasp_object: "sponge".into(),
        master: "board".into(),
        slave: "sponge".into(),
        grasp_center: Vec3::new(0.0, 0.0, half.z),
        grasp_jitter: Vec3::new(0.4 * half.x, 0.4 * half.y, 0.0),
        motion: Motion::Polyline(vec![start, end]),
        goal: Goal::Wiped { surface: "board".into(), min_span: 0.7 },
        distractors: vec![],
    }
}

fn pour_scene<R: Rng>(d: &mut Dims<R>, mirrored: bool) -> Scene {
    let bw = d.scale(0.2);
    let bh = 0.07;
    let side = if mirrored { 1.0 } else { -1.0 };
    let bowl = ObjectModel::new(
        "bowl",
        Vec3::new(bw / 2.0, bw / 2.0, bh / 2.0),
        Pose::from_translation(Vec3::new(0.0, 0.0, bh / 2.0)),
        Kinematic::Fixed,
    );
    let half = Vec3::new(0.035, 0.035, 0.05);
    let start = Vec3::new(side * (bw / 2.0 + 0.045), 0.0, half.z);
    let mut cup = ObjectModel::new("cup", half, Pose::from_translation(start), Kinematic::Free);
    let face = side * half.x;
    cup.parts.push(part("grip", Vec3::new(face, -0.4 * half.y, -0.4 * half.z), Vec3::new(face, 0.4 * half.y, 0.4 * half.z)));
    let q = approach_frame(Vec3::new(-side, 0.0, 0.0), Vec3::unit(1));
    cup.sites.push(site("grip", Vec3::new(face, -0.5 * half.y, -0.5 * half.z), Vec3::new(face, 0.5 * half.y, 0.5 * half.z), q));
    let pivot = Vec3::new(start.x - side * half.x, 0.0, 2.0 * half.z + 0.02);
    Scene {
        objects: vec![bowl, cup],
        root: Pose::identity(),
        grasp_object: "cup".into(),
        master: "bowl".into(),
        slave: "cup".into(),
        grasp_center: Vec3::new(face, 0.0, 0.0),
        grasp_jitter: Vec3::new(0.0, 0.3 * half.y, 0.3 * half.z),
        motion: Motion::Rotate { origin: pivot, axis: Vec3::new(0.0, side, 0.0), angle: 110f64.to_radians() },
        goal: Goal::Poured {
            vessel: "cup".into(),
            target: "bowl".into(),
            min_tilt: 75f64.to_radians(),
            mouth: Vec3::new(0.0, 0.0, half.z),
        },
        distractors: vec![],
    }
}

/// Ground-truth segment of a generated demonstration (frame indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub phase: Phase,
    pub master: String,
    pub slave: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub template: TemplateId,
    pub task_text: String,
    pub segments: Vec<TruthSegment>,
    /// Hand contact interval (onset frame, release frame).
    pub contact: (usize, usize),
    /// Gripper pose in the grasped object's frame.
    pub grasp_in_object: Pose,
    /// Slave pose relative to the master at contact onset and at release.
    pub relative_start: Pose,
    pub relative_end: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDemo {
    pub trace: PerceptionTrace,
    pub ground_truth: GroundTruth,
}

fn noisy_pose<R: Rng>(p: &Pose, sigma: f64, rng: &mut R) -> Pose {
    if sigma <= 0.0 {
        return *p;
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    let dp = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    let dr = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    Pose { position: p.position + dp, orientation: Quat::from_rotation_vector(dr).mul_quat(p.orientation) }
}

fn noisy_cloud<R: Rng>(local: &[Vec3], pose: &Pose, sigma: f64, rng: &mut R) -> PointCloud {
    let n = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("valid sigma"));
    let pts = local
        .iter()
        .map(|p| {
            let w = pose.transform_point(*p);
            match &n {
                Some(n) => w + Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
                None => w,
            }
        })
        .collect();
    PointCloud::new(pts, WORLD_FRAME)
}

/// Analytically constructed demonstration: approach, grasp, manipulate,
/// release, retreat. Ground truth is recorded before noise is applied.
pub fn generate_demo(template: TemplateId, seed: u64, noise: NoiseModel) -> GeneratedDemo {
    generate_demo_in(template, seed, noise, Environment::Seen)
}

pub fn generate_demo_in(template: TemplateId, seed: u64, noise: NoiseModel, env: Environment) -> GeneratedDemo {
    assert!(noise.pose_sigma_m >= 0.0 && noise.cloud_sigma_m >= 0.0, "noise sigmas must be non-negative");
    let scene = build_scene(template, seed, env);
    let mut world = scene.world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03 ^ template.index());

    let grasped = scene.model(&scene.grasp_object);
    let site_q = grasped.sites[0].orientation;
    let jitter = Vec3::new(
        rng.gen_range(-1.0..=1.0) * scene.grasp_jitter.x,
        rng.gen_range(-1.0..=1.0) * scene.grasp_jitter.y,
        rng.gen_range(-1.0..=1.0) * scene.grasp_jitter.z,
    );
    let grasp_in_object = Pose { position: scene.grasp_center + jitter, orientation: site_q };
    let grasp_obj_pose = world.objects[&scene.grasp_object].pose;
    let grasp_world = grasp_obj_pose.mul_pose(&grasp_in_object);
    let approach_dir = grasp_world.transform_vector(Vec3::unit(2));

    // Hand poses and slave poses per frame, noise-free.
    let mut hand = Vec::new();
    let mut slave_poses = Vec::new();
    let slave_rest = world.objects[&scene.slave].pose;
    for k in 0..=APPROACH_FRAMES {
        let back = APPROACH_DISTANCE * (APPROACH_FRAMES - k) as f64 / APPROACH_FRAMES as f64;
        hand.push(Pose { position: grasp_world.position - approach_dir * back, orientation: grasp_world.orientation });
        slave_poses.push(slave_rest);
    }
    let contact_start = APPROACH_FRAMES;
    for _ in 0..GRASP_DWELL {
        hand.push(grasp_world);
        slave_poses.push(slave_rest);
    }
    let grasp_in_slave = slave_rest.inverse().mul_pose(&grasp_world);
    for k in 1..=MANIP_FRAMES {
        let s = k as f64 / MANIP_FRAMES as f64;
        let sp = scene.slave_pose(&world, s);
        hand.push(sp.mul_pose(&grasp_in_slave));
        slave_poses.push(sp);
    }
    let final_slave = *slave_poses.last().unwrap();
    let release_pose = *hand.last().unwrap();
    for _ in 0..RELEASE_DWELL {
        hand.push(release_pose);
        slave_poses.push(final_slave);
    }
    let contact_end = hand.len();
    let retreat_dir = release_pose.transform_vector(Vec3::unit(2));
    for k in 1..=RETREAT_FRAMES {
        hand.push(Pose {
            position: release_pose.position - retreat_dir * (RETREAT_STEP * k as f64),
            orientation: release_pose.orientation,
        });
        slave_poses.push(final_slave);
    }

    let hand_local = hand_model();
    let local_clouds: BTreeMap<String, Vec<Vec3>> =
        scene.objects.iter().map(|m| (m.id.clone(), m.cloud().points)).collect();
    let mut frames = Vec::with_capacity(hand.len());
    for (i, (hp, sp)) in hand.iter().zip(&slave_poses).enumerate() {
        let hp_n = noisy_pose(hp, noise.pose_sigma_m, &mut rng);
        let hand_cloud = noisy_cloud(&hand_local, &hp_n, noise.cloud_sigma_m, &mut rng);
        let mut object_poses = BTreeMap::new();
        let mut object_clouds = BTreeMap::new();
        for m in &scene.objects {
            let true_pose = if m.id == scene.slave { *sp } else { world.objects[&m.id].pose };
            let p = noisy_pose(&true_pose, noise.pose_sigma_m, &mut rng);
            object_clouds.insert(m.id.clone(), noisy_cloud(&local_clouds[&m.id], &p, noise.cloud_sigma_m, &mut rng));
            object_poses.insert(m.id.clone(), p);
        }
        frames.push(Frame { t: i as f64 / DEMO_FPS, hand_pose: hp_n, hand_cloud, object_poses, object_clouds });
    }
    let master_pose = world.objects[&scene.master].pose;
    let relative = |p: &Pose| master_pose.inverse().mul_pose(p);
    let demo_id = format!("{template}-{seed:04}");
    let mut parts = BTreeMap::new();
    for m in &scene.objects {
        if !m.parts.is_empty() {
            parts.insert(m.id.clone(), m.parts.clone());
        }
    }
    // leave the world untouched for callers that rebuild it
    world.objects.get_mut(&scene.slave).unwrap().pose = slave_rest;
    GeneratedDemo {
        trace: PerceptionTrace { demo_id, fps: DEMO_FPS, frames, object_parts: parts },
        ground_truth: GroundTruth {
            template,
            task_text: template.task_text().to_string(),
            segments: vec![
                TruthSegment {
                    start_frame: 0,
                    end_frame: contact_start,
                    phase: Phase::Grasping,
                    master: scene.grasp_object.clone(),
                    slave: HAND.to_string(),
                },
                TruthSegment {
                    start_frame: contact_start,
                    end_frame: contact_end,
                    phase: Phase::Manipulation,
                    master: scene.master.clone(),
                    slave: scene.slave.clone(),
                },
            ],
            contact: (contact_start, contact_end),
            grasp_in_object,
            relative_start: relative(&slave_rest),
            relative_end: relative(&final_slave),
        },
    }
}

/// Fresh world for a template; the same seed always yields the same world.
pub fn build_world(template: TemplateId, seed: u64) -> WorldState {
    build_world_in(template, seed, Environment::Seen)
}

pub fn build_world_in(template: TemplateId, seed: u64, env: Environment) -> WorldState {
    build_scene(template, seed, env).world()
}

/// The template's success predicate evaluated on a world.
pub fn judge(world: &WorldState, _template: TemplateId) -> bool {
    world.judge()
}

/// Ids of the grasped object, the manipulation master and the slave.
pub fn task_roles(template: TemplateId) -> (String, String, String) {
    let s = build_scene(template, 0, Environment::Seen);
    (s.grasp_object, s.master, s.slave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud_distance;

    #[test]
    fn template_names_round_trip() {
        for name in TemplateId::NAMES {
            let t: TemplateId = name.parse().unwrap();
            assert_eq!(t.to_string().parse::<TemplateId>().unwrap(), t);
        }
        let err = "teapot".parse::<TemplateId>().unwrap_err().to_string();
        assert!(err.contains("drawer") && err.contains("pour-arc"));
    }

    #[test]
    fn same_seed_same_demo() {
        let noise = NoiseModel { pose_sigma_m: 0.002, cloud_sigma_m: 0.001 };
        let a = generate_demo(TemplateId::Drawer, 7, noise);
        let b = generate_demo(TemplateId::Drawer, 7, noise);
        assert_eq!(a, b);
        let c = generate_demo(TemplateId::Drawer, 8, noise);
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn contact_window_matches_threshold() {
        for t in TemplateId::DEFAULT_SET {
            let demo = generate_demo(t, 3, NoiseModel::default());
            let (on, off) = demo.ground_truth.contact;
            let grasped = &demo.ground_truth.segments[0].master;
            let d = |i: usize| {
                let f = &demo.trace.frames[i];
                cloud_distance(&f.hand_cloud, &f.object_clouds[grasped]).unwrap()
            };
            assert!(d(on - 1) > 0.01, "{t}: pre-contact {}", d(on - 1));
            assert!(d(on) < 0.01, "{t}: contact {}", d(on));
            assert!(d(off - 1) < 0.01, "{t}: last contact {}", d(off - 1));
            assert!(d(off) > 0.01, "{t}: release {}", d(off));
        }
    }

    #[test]
    fn fresh_world_not_solved_and_full_range_solves() {
        for seed in 0..10 {
            let mut world = build_world(TemplateId::Drawer, seed);
            assert!(!judge(&world, TemplateId::Drawer));
            let drawer = world.objects.get_mut("drawer").unwrap();
            let hi = drawer.kinematic.range().unwrap().1;
            drawer.set_joint(hi);
            assert!(judge(&world, TemplateId::Drawer));
        }
    }

    #[test]
    fn demo_motion_reaches_goal_in_world() {
        for t in TemplateId::DEFAULT_SET.into_iter().chain([
            TemplateId::HingedDoor(DoorVariant::Oven),
            TemplateId::HingedDoor(DoorVariant::Box),
        ]) {
            for env in [Environment::Seen, Environment::Unseen] {
                let scene = build_scene(t, 11, env);
                let mut world = scene.world();
                assert!(!world.judge(), "{t} solved at start");
                let slave = world.objects[&scene.slave].pose;
                let grasp = slave.mul_pose(&Pose::from_translation(Vec3::new(0.0, 0.0, 0.01)));
                world.gripper.pose = grasp;
                world.close_gripper(Some(&scene.slave));
                for k in 0..=40 {
                    let sp = scene.slave_pose(&world, k as f64 / 40.0);
                    world.move_gripper(sp.mul_pose(&world.gripper.grasp_in_object.unwrap()));
                }
                world.open_gripper();
                assert!(world.judge(), "{t} {env:?} not solved by demo motion");
            }
        }
    }

    #[test]
    fn sites_lie_on_parts() {
        for t in TemplateId::DEFAULT_SET {
            let world = build_world(t, 1);
            let (grasped, _, _) = task_roles(t);
            let obj = &world.objects[&grasped];
            let site = &obj.grasp_sites[0];
            let part = obj.props.parts.iter().find(|p| p.name == site.part).unwrap();
            assert!(part.contains((site.lo + site.hi) * 0.5, 0.05), "{t}");
        }
    }
}
