use serde::Deserialize;

use super::{CellSelection, CorrectiveAction, Payload, QueryKind, Reasoner, ReasonerError, ReasonerQuery, ReasonerResponse, TaskObject};
use crate::grounding::Phase;
use crate::learner::{Curve, Region};
use crate::scene::{GraspGrid, Scene};
use crate::{Pose, Vec3};

/// Required object ids, task text, task objects with relations.
type TaskRule = (&'static [&'static str], &'static str, &'static [(&'static str, &'static str)]);

const TASK_RULES: &[TaskRule] = &[
    (&["cabinet", "drawer"], "open the drawer", &[("drawer", "in the cabinet")]),
    (&["microwave", "door"], "open the microwave door", &[("door", "front of the microwave"), ("microwave", "on the desk")]),
    (&["oven", "door"], "open the oven door", &[("door", "front of the oven"), ("oven", "on the desk")]),
    (&["box", "lid"], "open the box lid", &[("lid", "on top of the box"), ("box", "on the desk")]),
    (&["block", "tray"], "put the block in the tray", &[("block", "beside the tray"), ("tray", "on the desk")]),
    (&["board", "sponge"], "wipe the board with the sponge", &[("sponge", "on the board"), ("board", "on the desk")]),
    (&["bowl", "cup"], "pour the cup into the bowl", &[("cup", "beside the bowl"), ("bowl", "on the desk")]),
    (&["cucumber", "knife"], "cut the cucumber", &[("knife", "in hand"), ("cucumber", "on the board")]),
];

/// Manipulation descriptions keyed on (slave, master); `*` matches any master.
const SUBTASK_RULES: &[(&str, &str, &str)] = &[
    ("drawer", "cabinet", "pull the drawer out of the cabinet"),
    ("door", "*", "swing the door open about its hinge"),
    ("lid", "*", "swing the lid open about its hinge"),
    ("block", "tray", "place the block in the tray"),
    ("sponge", "board", "wipe the board with the sponge"),
    ("cup", "bowl", "pour the cup into the bowl"),
    ("knife", "cucumber", "cut the cucumber with the knife"),
];

/// Trajectory classes keyed on a word of the subtask description.
const CLASS_RULES: &[(&str, &str, &str)] = &[
    ("pull", "linear-pull", "translate along a straight line away from the master"),
    ("swing", "arc-about-hinge", "rotate about the hinge axis of the master"),
    ("place", "lift-move-place", "lift, carry over the master, and lower into it"),
    ("wipe", "linear-wipe", "slide across the master surface in contact"),
    ("pour", "arc-pour", "tilt about the rim on the master side until the mouth faces down"),
    ("twist", "screw-twist", "rotate about an axis while advancing along it"),
    ("cut", "linear-pull", "slide straight through the master"),
];

/// Deterministic rule-table reasoner covering the synthetic scenes.
#[derive(Debug, Clone, Default)]
pub struct ScriptedReasoner;

impl ScriptedReasoner {
    pub fn new() -> Self {
        Self
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric() && c != '-').filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn statements(scene: &Scene, q: &ReasonerQuery) -> Vec<String> {
    let mut out: Vec<String> = scene.fact("reference_statements").unwrap_or_default();
    out.extend(q.context.iter().cloned());
    out
}

#[derive(Deserialize)]
struct RetrievedPlan {
    task_text: String,
    steps: Vec<String>,
    #[serde(default)]
    objects: Vec<String>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Articulation {
    Prismatic { axis: Vec3, range: (f64, f64) },
    Hinged { axis: Vec3, origin: Vec3, range: (f64, f64) },
}

impl ScriptedReasoner {
    fn task(&self, q: &ReasonerQuery) -> Option<Payload> {
        let ids: Vec<&str> = q.scene.objects.iter().map(|o| o.id.as_str()).collect();
        for (required, text, objs) in TASK_RULES {
            if required.iter().all(|r| ids.contains(r)) {
                let objects = objs
                    .iter()
                    .map(|(n, rel)| TaskObject { name: n.to_string(), spatial_relation: rel.to_string() })
                    .collect();
                return Some(Payload::Task { task_text: text.to_string(), objects });
            }
        }
        let moved: Vec<String> = q.scene.fact("moved_objects").unwrap_or_default();
        let first = moved.first()?;
        Some(Payload::Task {
            task_text: format!("move the {first}"),
            objects: vec![TaskObject { name: first.clone(), spatial_relation: "on the desk".into() }],
        })
    }

    fn subtask(&self, q: &ReasonerQuery) -> Option<Payload> {
        let s = &q.scene;
        let moved: Vec<String> = s.fact("moved_objects").unwrap_or_default();
        match moved.first() {
            None => {
                let object = s.fact_str("contact_object")?.to_string();
                let description = match s.fact_str("contact_part") {
                    Some(part) => format!("grasp the {object} {part}"),
                    None => format!("grasp the {object}"),
                };
                Some(Payload::Subtask { phase: Phase::Grasping, master: object, slave: crate::HAND.into(), description })
            }
            Some(slave) => {
                let master = s.fact_str("nearest_to_moved")?.to_string();
                let description = SUBTASK_RULES
                    .iter()
                    .find(|(sl, m, _)| sl == slave && (*m == "*" || *m == master))
                    .map(|(_, _, d)| d.to_string())
                    .unwrap_or_else(|| format!("move the {slave} relative to the {master}"));
                Some(Payload::Subtask { phase: Phase::Manipulation, master, slave: slave.clone(), description })
            }
        }
    }

    fn semantic(&self, q: &ReasonerQuery) -> Option<Payload> {
        let text = q.context.join(" ");
        let ws = words(&text);
        if let Some((_, class, statement)) = CLASS_RULES.iter().find(|(w, _, _)| ws.iter().any(|x| x == w)) {
            return Some(Payload::Semantic { statements: vec![statement.to_string()], trajectory_class: class.to_string() });
        }
        let kp: Vec<Vec3> = q.scene.keypoints.iter().map(|k| k.position).collect();
        let (first, last) = (*kp.first()?, *kp.last()?);
        let chord = last - first;
        let off = kp
            .iter()
            .map(|p| {
                let t = if chord.norm() > 0.0 { (*p - first).dot(chord) / chord.dot(chord) } else { 0.0 };
                p.distance(first + chord * t)
            })
            .fold(0.0, f64::max);
        let class = if off <= 0.02 * chord.norm().max(1e-9) { "linear-pull" } else { "piecewise" };
        Some(Payload::Semantic { statements: vec!["follow the demonstrated path".into()], trajectory_class: class.into() })
    }

    fn groups(&self, q: &ReasonerQuery) -> Option<Payload> {
        let mut keys: Vec<String> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, n) in q.scene.notations.iter().enumerate() {
            let key = match &n.part {
                Some(p) => format!("part:{p}"),
                None => format!("face:{}", n.face),
            };
            match keys.iter().position(|k| *k == key) {
                Some(g) => groups[g].push(i + 1),
                None => {
                    keys.push(key);
                    groups.push(vec![i + 1]);
                }
            }
        }
        let statements = keys
            .iter()
            .map(|k| match k.split_once(':') {
                Some(("part", p)) => format!("grasp the {p} midsection"),
                Some((_, f)) => format!("grasp the {f} face"),
                None => unreachable!("keys always carry a prefix"),
            })
            .collect();
        Some(Payload::Groups { statements, groups })
    }

    fn grid_cells(&self, q: &ReasonerQuery) -> Option<Payload> {
        let s = &q.scene;
        let grid: &GraspGrid = s.grid.as_ref()?;
        let target = s.objects.first()?;
        let current: Region = s.fact("current_region")?;
        let center = current.center();
        let statement_words: Vec<String> = statements(s, q).iter().flat_map(|t| words(t)).collect();
        let part = target.parts.iter().find(|p| statement_words.iter().any(|w| *w == p.name.to_lowercase()));
        let (ax_a, ax_b, row_ax) = (grid.perspectives[0].column_axis, grid.perspectives[1].column_axis, grid.overlap_axis());
        let at_center = || {
            let row = GraspGrid::index_of(grid.m, center[row_ax]);
            let (ca, cb) = (GraspGrid::index_of(grid.n, center[ax_a]), GraspGrid::index_of(grid.n, center[ax_b]));
            ((row, row, ca, ca), (row, row, cb, cb))
        };
        let ((r0, r1, a0, a1), (_, _, b0, b1)) = match part {
            Some(p) => {
                let (lo, hi) = target.normalized_part(p);
                let inside = (0..3).all(|i| center[i] >= lo[i] - 0.02 && center[i] <= hi[i] + 0.02);
                if inside {
                    at_center()
                } else {
                    let (r0, r1) = GraspGrid::cover(grid.m, lo[row_ax], hi[row_ax]);
                    let (a0, a1) = GraspGrid::cover(grid.n, lo[ax_a], hi[ax_a]);
                    let (b0, b1) = GraspGrid::cover(grid.n, lo[ax_b], hi[ax_b]);
                    ((r0, r1, a0, a1), (r0, r1, b0, b1))
                }
            }
            None => at_center(),
        };
        use crate::scene::Cell;
        let sel = CellSelection {
            perspective_a: grid.format_selection(Cell { row: r0, col: a0 }, Cell { row: r1, col: a1 }),
            perspective_b: grid.format_selection(Cell { row: r0, col: b0 }, Cell { row: r1, col: b1 }),
        };
        Some(Payload::GridCells { samples: vec![sel; q.sample_count] })
    }

    fn manipulation(&self, q: &ReasonerQuery) -> Option<Payload> {
        let s = &q.scene;
        let current: Curve = s.fact("current_curve")?;
        let start: Pose = s.fact("slave_start")?;
        let class = s.fact_str("trajectory_class")?.to_string();
        let statements: Vec<String> = s.fact("reference_statements").unwrap_or_default();
        let delta = s.fact_str("task_delta").unwrap_or_default().to_lowercase();
        let fully = words(&delta).iter().any(|w| w == "fully");
        let articulation: Option<Articulation> = s.fact("articulation");
        let master = s.objects.first()?;
        let curve = match (current, articulation) {
            (Curve::Line { direction, length, .. }, Some(Articulation::Prismatic { axis, range })) => {
                let a = axis.try_normalize()?;
                let dir = if direction.dot(a) < 0.0 { -a } else { a };
                let dir = if dir.dot(a) < 0.0 { a } else { dir };
                let length = if fully { range.1 } else { length.min(range.1) };
                Curve::Line { start, direction: dir, length }
            }
            (Curve::Line { direction, length, .. }, _) => {
                let inside = |p: Vec3| {
                    let n = master.normalize(p);
                    n.x.abs() <= 0.5 && n.y.abs() <= 0.5
                };
                let end = start.position + direction.try_normalize()? * length;
                let flipped = start.position - direction.try_normalize()? * length;
                let direction = if !inside(end) && inside(flipped) { -direction } else { direction };
                Curve::Line { start, direction, length }
            }
            (Curve::Arc { angle, .. }, Some(Articulation::Hinged { axis, origin, range })) => {
                let a = axis.try_normalize()?;
                let center = origin + a * (start.position - origin).dot(a);
                let angle = if fully { range.1 } else { angle.abs().min(range.1) };
                Curve::Arc { start, center, axis: a, angle }
            }
            (Curve::Arc { start: old, center, axis, angle }, _) => {
                let inv = old.orientation.conjugate();
                let offset = start.orientation.rotate(inv.rotate(center - old.position));
                let mut axis = start.orientation.rotate(inv.rotate(axis));
                let mut offset = offset;
                let to_master = master.bbox_center.position - start.position;
                if let Some(h) = Vec3::new(to_master.x, to_master.y, 0.0).try_normalize() {
                    if offset.dot(h) < 0.0 {
                        offset = offset - h * (2.0 * offset.dot(h));
                        axis = -(axis - h * (2.0 * axis.dot(h)));
                    }
                }
                Curve::Arc { start, center: start.position + offset, axis, angle }
            }
            (Curve::Screw { start: old, center, axis, angle, advance }, _) => {
                let shift = start.position - old.position;
                Curve::Screw { start, center: center + shift, axis, angle, advance }
            }
            (Curve::PiecewiseLine { mut knots, .. }, _) => {
                let lift = if knots.len() > 2 { Some(knots[1] - knots[0]) } else { None };
                knots[0] = start.position;
                if let Some(l) = lift {
                    knots[1] = start.position + l;
                }
                Curve::PiecewiseLine { orientation: start.orientation, knots }
            }
        };
        Some(Payload::Manipulation { statements, trajectory_class: class, curve })
    }

    fn plan(&self, q: &ReasonerQuery) -> Option<Payload> {
        let s = &q.scene;
        let task = s.fact_str("task")?.trim().to_lowercase();
        let plans: Vec<RetrievedPlan> = s.fact("retrieved_plans").unwrap_or_default();
        if let Some(p) = plans.iter().find(|p| p.task_text.trim().to_lowercase() == task) {
            return Some(Payload::Plan { steps: p.steps.clone(), objects: p.objects.clone() });
        }
        let ws = words(&task);
        if ws.first().map(String::as_str) == Some("put") {
            let in_pos = ws.iter().position(|w| w == "in")?;
            let item = ws[1..in_pos].iter().rfind(|w| *w != "the")?.clone();
            let container = ws.last()?.clone();
            let base = plans.iter().find(|p| words(&p.task_text) == ["open", "the", container.as_str()])?;
            let mut steps = base.steps.clone();
            steps.push(format!("grasp the {item}"));
            steps.push(format!("place the {item} in the {container}"));
            let mut objects = base.objects.clone();
            if !objects.contains(&item) {
                objects.push(item);
            }
            return Some(Payload::Plan { steps, objects });
        }
        None
    }

    fn correction(&self, q: &ReasonerQuery) -> Option<Payload> {
        let s = &q.scene;
        let class = s.fact_str("classification")?;
        let master_moved: bool = s.fact("master_moved").unwrap_or(false);
        let (actions, why) = if master_moved {
            (vec![CorrectiveAction::ReLocalize, CorrectiveAction::RePlanTrajectory], "the master object moved during execution")
        } else {
            match class {
                "grasp-miss" => (vec![CorrectiveAction::ReGrasp], "the gripper closed on empty space"),
                "no-effect" => (vec![CorrectiveAction::ReGrasp], "the held object did not follow the gripper"),
                "trajectory-deviation" => (vec![CorrectiveAction::RePlanTrajectory], "the object left the planned path"),
                "collision" => (vec![CorrectiveAction::RePlanTrajectory], "the path was blocked"),
                _ => (vec![CorrectiveAction::Abort], "unrecognized failure"),
            }
        };
        Some(Payload::Correction { actions, rationale: why.into() })
    }
}

impl Reasoner for ScriptedReasoner {
    fn name(&self) -> &str {
        "scripted"
    }

    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
        q.validate()?;
        let payload = match q.kind {
            QueryKind::TaskRecognition => self.task(q),
            QueryKind::SubtaskRecognition => self.subtask(q),
            QueryKind::SemanticLearning => self.semantic(q),
            QueryKind::GraspGrouping => self.groups(q),
            QueryKind::GraspRegionSelection => self.grid_cells(q),
            QueryKind::ManipulationComparison => self.manipulation(q),
            QueryKind::HighLevelPlanning => self.plan(q),
            QueryKind::FailureReasoning => self.correction(q),
        }
        .ok_or(ReasonerError::Unsupported(q.kind))?;
        let transcript = serde_json::to_string(&payload).expect("payload serializes");
        Ok(ReasonerResponse { payload, transcript })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Notation, SceneObject};

    fn obj(id: &str) -> SceneObject {
        SceneObject { id: id.into(), pose: Pose::identity(), bbox_center: Pose::identity(), extents: Vec3::splat(0.2), parts: vec![] }
    }

    #[test]
    fn same_query_same_response() {
        let scene = Scene { objects: vec![obj("cabinet"), obj("drawer")], ..Default::default() };
        let q = ReasonerQuery::new(QueryKind::TaskRecognition, scene);
        let r = ScriptedReasoner;
        assert_eq!(r.query(&q).unwrap(), r.query(&q).unwrap());
    }

    #[test]
    fn groups_key_on_faces_and_parts() {
        let note = |l: &str, face: &str, part: Option<&str>| Notation {
            label: l.into(),
            object: "box".into(),
            position: Vec3::zero(),
            orientation: None,
            face: face.into(),
            part: part.map(String::from),
        };
        let scene = Scene {
            objects: vec![obj("box")],
            notations: vec![note("1", "+z", None), note("2", "-x", None), note("3", "+z", None)],
            ..Default::default()
        };
        let resp = ScriptedReasoner.query(&ReasonerQuery::new(QueryKind::GraspGrouping, scene)).unwrap();
        assert_eq!(
            resp.payload,
            Payload::Groups { statements: vec!["grasp the +z face".into(), "grasp the -x face".into()], groups: vec![vec![1, 3], vec![2]] }
        );
    }

    #[test]
    fn failure_rules() {
        let mut scene = Scene { objects: vec![obj("drawer")], ..Default::default() };
        scene.set_fact("classification", "grasp-miss");
        let q = ReasonerQuery::new(QueryKind::FailureReasoning, scene.clone());
        let Payload::Correction { actions, .. } = ScriptedReasoner.query(&q).unwrap().payload else { panic!() };
        assert_eq!(actions, vec![CorrectiveAction::ReGrasp]);
        scene.set_fact("master_moved", true);
        let q = ReasonerQuery::new(QueryKind::FailureReasoning, scene);
        let Payload::Correction { actions, .. } = ScriptedReasoner.query(&q).unwrap().payload else { panic!() };
        assert_eq!(actions, vec![CorrectiveAction::ReLocalize, CorrectiveAction::RePlanTrajectory]);
    }
}
