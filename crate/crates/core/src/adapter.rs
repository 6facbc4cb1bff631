//! Adapt retrieved constraints to a new scene by iterative comparison with
//! the reference interaction, plus task planning and failure reasoning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::BankHandle;
use crate::learner::{Curve, Geometric, GraspRegionSet, LearnError, Region, SemanticConstraints, Skill, TrajectoryProgram};
use crate::reasoner::{ask, CorrectiveAction, Payload, QueryKind, Reasoner, ReasonerError, ReasonerQuery, ReasonerResponse};
use crate::scene::{Cell, GraspGrid, Keypoint, Scene, SceneObject};
use crate::grounding::Phase;
use crate::world::{Kinematic, WorldState};
use crate::{ObjectProperties, Pose, Quat, Vec3};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("adaptation failed: {message}")]
    Adaptation { message: String, transcripts: Vec<String> },
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub max_iterations: usize,
    pub grid_m: usize,
    pub grid_n: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub max_requeries: usize,
    pub failure_rounds: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { max_iterations: 4, grid_m: 10, grid_n: 10, samples: 5, tolerance: 1e-3, max_requeries: 2, failure_rounds: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub iteration: usize,
    pub semantic: SemanticConstraints,
    pub geometric: Geometric,
    pub reference_semantic: SemanticConstraints,
    pub reference_geometric: Geometric,
    pub reference_scene: Scene,
    pub converged: bool,
}

impl AdaptationState {
    pub fn initial(skill: &Skill) -> Self {
        Self {
            iteration: 0,
            semantic: skill.semantic.clone(),
            geometric: skill.geometric.clone(),
            reference_semantic: skill.semantic.clone(),
            reference_geometric: skill.geometric.clone(),
            reference_scene: skill.reference.clone(),
            converged: false,
        }
    }

    fn advance(&self, semantic: SemanticConstraints, geometric: Geometric, tol: f64) -> Self {
        let mut next = Self { iteration: self.iteration + 1, semantic, geometric, converged: false, ..self.clone() };
        next.converged = check_convergence(self, &next, tol);
        next
    }
}

/// True iff the largest normalized parameter change is below `tol` and the
/// semantic statements are unchanged.
pub fn check_convergence(prev: &AdaptationState, curr: &AdaptationState, tol: f64) -> bool {
    let (a, b) = (prev.geometric.to_vector(), curr.geometric.to_vector());
    if a.len() != b.len() || prev.semantic.statements != curr.semantic.statements {
        return false;
    }
    let change = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    change < tol
}

/// Outcome of an adaptation loop with every intermediate state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation<T> {
    pub result: T,
    pub states: Vec<AdaptationState>,
    pub transcripts: Vec<String>,
}

impl<T> Adaptation<T> {
    pub fn iterations(&self) -> usize {
        self.states.last().map_or(0, |s| s.iteration)
    }

    pub fn converged(&self) -> bool {
        self.states.last().is_some_and(|s| s.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub steps: Vec<String>,
    pub objects: Vec<String>,
    pub transcript: String,
}

/// Scene listing every world object with its pose.
pub fn world_scene(world: &WorldState) -> Scene {
    Scene {
        objects: world.objects.values().map(|o| SceneObject::from_props(&o.props, o.pose)).collect(),
        ..Default::default()
    }
}

pub fn plan_high_level(
    task_text: &str,
    world: &WorldState,
    bank: &BankHandle,
    reasoner: &dyn Reasoner,
) -> Result<PlanOutcome, AdaptError> {
    if world.objects.is_empty() {
        return Err(AdaptError::Planning("scene has no objects".into()));
    }
    let retrieved = bank.retrieve_plan(task_text, 3).map_err(|e| AdaptError::Planning(e.to_string()))?;
    let mut scene = world_scene(world);
    scene.set_fact("task", task_text);
    let examples: Vec<serde_json::Value> = retrieved
        .iter()
        .map(|r| {
            serde_json::json!({
                "task_text": r.record.task_text,
                "steps": r.record.steps,
                "objects": r.record.objects,
                "score": r.score,
            })
        })
        .collect();
    scene.set_fact("retrieved_plans", &examples);
    let context = retrieved.iter().map(|r| format!("example: {} -> {}", r.record.task_text, r.record.steps.join("; "))).collect();
    let q = ReasonerQuery::new(QueryKind::HighLevelPlanning, scene).with_context(context);
    let resp = match ask(reasoner, &q) {
        Ok(r) => r,
        Err(ReasonerError::UnknownReference { names, .. }) => {
            return Err(AdaptError::Validation(format!("plan references objects not in the scene: {}", names.join(", "))))
        }
        Err(e) => return Err(AdaptError::Planning(e.to_string())),
    };
    match resp.payload {
        Payload::Plan { steps, objects } if !steps.is_empty() => Ok(PlanOutcome { steps, objects, transcript: resp.transcript }),
        _ => Err(AdaptError::Planning("reasoner returned an empty plan".into())),
    }
}

/// Free-text description of the target objects handed to manipulation comparison.
pub fn compose_task_delta(task_text: &str, objects: &[&ObjectProperties]) -> String {
    let mut out = task_text.to_string();
    for o in objects {
        let e = o.bbox_extents;
        out.push_str(&format!("; {} is {:.3} x {:.3} x {:.3} m", o.object_id, e.x, e.y, e.z));
    }
    out
}

fn grid_scene(target: &ObjectProperties, grid: &GraspGrid, reference: &Scene) -> Scene {
    let mut scene = Scene {
        objects: vec![SceneObject::from_props(target, Pose::identity())],
        grid: Some(grid.clone()),
        ..Default::default()
    };
    scene.set_fact("reference", reference);
    scene
}

fn cells_at(grid: &GraspGrid, n: Vec3) -> [(Cell, Cell); 2] {
    let row = GraspGrid::index_of(grid.m, n[grid.overlap_axis()]);
    [0, 1].map(|i| {
        let col = GraspGrid::index_of(grid.n, n[grid.perspectives[i].column_axis]);
        (Cell { row, col }, Cell { row, col })
    })
}

fn majority<'a>(items: impl Iterator<Item = &'a (Cell, Cell)>) -> Option<(Cell, Cell)> {
    let mut counts: BTreeMap<(Cell, Cell), usize> = BTreeMap::new();
    for it in items {
        *counts.entry(*it).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    let mut winners = counts.into_iter().filter(|(_, c)| *c == best);
    let first = winners.next()?.0;
    winners.next().is_none().then_some(first)
}

fn consistent(a: &(Cell, Cell), b: &(Cell, Cell)) -> bool {
    a.0.row.abs_diff(b.0.row) <= 1 && a.1.row.abs_diff(b.1.row) <= 1
}

/// Surface normal of a cell box: taken from the part the cells overlap most
/// when that part touches the box boundary, else from the cells themselves.
fn normal_axis(grid: &GraspGrid, intervals: &[(usize, usize); 3], lo: Vec3, hi: Vec3, target: &SceneObject) -> Option<(usize, f64)> {
    const TOUCH: f64 = 0.02;
    let overlap = |a: Vec3, b: Vec3| (0..3).map(|i| (hi[i].min(b[i]) - lo[i].max(a[i])).max(0.0)).product::<f64>();
    let part = target
        .parts
        .iter()
        .map(|p| target.normalized_part(p))
        .map(|(a, b)| (overlap(a, b), a, b))
        .filter(|(v, _, _)| *v > 0.0)
        .max_by(|x, y| x.0.total_cmp(&y.0));
    if let Some((_, a, b)) = part {
        let touching = (0..3)
            .filter_map(|ax| {
                let (neg, pos) = ((a[ax] + 0.5).abs() < TOUCH, (b[ax] - 0.5).abs() < TOUCH);
                let side = match (neg, pos) {
                    (true, false) => -1.0,
                    (false, true) => 1.0,
                    _ => return None,
                };
                Some((b[ax] - a[ax], ax, side))
            })
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        if let Some((_, ax, side)) = touching {
            return Some((ax, side));
        }
    }
    let row_ax = grid.overlap_axis();
    (0..3)
        .filter_map(|ax| {
            let (a, b) = intervals[ax];
            let n = if ax == row_ax { grid.m } else { grid.n };
            let width = (b - a + 1) as f64 / n as f64;
            match (a == 0, b + 1 == n) {
                (true, false) => Some((width, ax, -1.0)),
                (false, true) => Some((width, ax, 1.0)),
                _ => None,
            }
        })
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
        .map(|(_, ax, side)| (ax, side))
}

/// Region built from the selected cells. Along the surface normal the
/// reference region's depth below its own face is kept.
fn region_from_cells(grid: &GraspGrid, sel: &[(Cell, Cell); 2], reference: &Region, target: &SceneObject) -> Region {
    let row_ax = grid.overlap_axis();
    let mut intervals = [(0usize, 0usize); 3];
    let rows = (sel[0].0.row.max(sel[1].0.row), sel[0].1.row.min(sel[1].1.row));
    intervals[row_ax] = if rows.0 <= rows.1 { rows } else { (sel[0].0.row, sel[0].1.row) };
    for (i, p) in grid.perspectives.iter().enumerate() {
        intervals[p.column_axis] = (sel[i].0.col, sel[i].1.col);
    }
    let counts = |ax: usize| if ax == row_ax { grid.m } else { grid.n };
    let mut lo = Vec3::zero();
    let mut hi = Vec3::zero();
    for ax in 0..3 {
        let (a, b) = GraspGrid::span(counts(ax), intervals[ax].0, intervals[ax].1);
        lo[ax] = a;
        hi[ax] = b;
    }
    let Some((k, sign)) = normal_axis(grid, &intervals, lo, hi, target) else {
        return Region { position_lo: lo, position_hi: hi, ..reference.clone() };
    };
    let rc = reference.center();
    let k_ref = rc.argmax_abs();
    let s_ref = if rc[k_ref] >= 0.0 { 1.0 } else { -1.0 };
    let depth = |v: f64| 0.5 - s_ref * v;
    let (d_a, d_b) = (depth(reference.position_lo[k_ref]), depth(reference.position_hi[k_ref]));
    let (na, nb) = (sign * (0.5 - d_a), sign * (0.5 - d_b));
    lo[k] = na.min(nb);
    hi[k] = na.max(nb);
    let mut n_ref = Vec3::zero();
    n_ref[k_ref] = s_ref;
    let mut n_new = Vec3::zero();
    n_new[k] = sign;
    let rot = Quat::from_two_vectors(n_ref, n_new);
    Region {
        position_lo: lo,
        position_hi: hi,
        orientation_ref: rot.mul_quat(reference.orientation_ref),
        orientation_cone_deg: reference.orientation_cone_deg,
    }
}

fn select_cells(
    grid: &GraspGrid,
    scene: &Scene,
    statement: &str,
    reasoner: &dyn Reasoner,
    cfg: &AdaptConfig,
    transcripts: &mut Vec<String>,
) -> Result<[(Cell, Cell); 2], AdaptError> {
    for _ in 0..=cfg.max_requeries {
        let q = ReasonerQuery::new(QueryKind::GraspRegionSelection, scene.clone())
            .with_context(vec![statement.to_string()])
            .with_samples(cfg.samples);
        let resp = ask(reasoner, &q)?;
        transcripts.push(resp.transcript);
        let Payload::GridCells { samples } = resp.payload else { unreachable!("validated kind") };
        let parsed: Vec<[(Cell, Cell); 2]> = samples
            .iter()
            .filter_map(|s| Some([grid.parse_selection(&s.perspective_a)?, grid.parse_selection(&s.perspective_b)?]))
            .filter(|[a, b]| consistent(a, b))
            .collect();
        let (Some(a), Some(b)) = (majority(parsed.iter().map(|p| &p[0])), majority(parsed.iter().map(|p| &p[1]))) else {
            log::debug!("grid selection rejected: no consistent majority");
            continue;
        };
        if consistent(&a, &b) {
            return Ok([a, b]);
        }
    }
    Err(AdaptError::Adaptation {
        message: format!("no consistent grid selection after {} re-queries", cfg.max_requeries),
        transcripts: transcripts.clone(),
    })
}

pub fn adapt_grasp(
    reference: &Skill,
    target_master: &ObjectProperties,
    reasoner: &dyn Reasoner,
    cfg: &AdaptConfig,
) -> Result<Adaptation<GraspRegionSet>, AdaptError> {
    if reference.phase != Phase::Grasping {
        return Err(AdaptError::Validation("grasp adaptation needs a grasping skill".into()));
    }
    let regions0 = reference.grasp_regions().expect("grasping skill has regions").clone();
    let grid = GraspGrid::new(cfg.grid_m, cfg.grid_n).map_err(AdaptError::Validation)?;
    let base = grid_scene(target_master, &grid, &reference.reference);
    let mut state = AdaptationState::initial(reference);
    let mut states = Vec::new();
    let mut transcripts = Vec::new();
    while state.iteration < cfg.max_iterations && !state.converged {
        let Geometric::Grasp(current) = &state.geometric else { unreachable!("grasp state") };
        let mut next = Vec::with_capacity(current.regions.len());
        for (i, region) in current.regions.iter().enumerate() {
            let statement = state.semantic.statements.get(i).or(state.semantic.statements.first()).cloned().unwrap_or_default();
            let mut scene = base.clone();
            scene.set_fact("current_region", region);
            scene.set_fact("reference_statements", &state.reference_semantic.statements);
            let sel = select_cells(&grid, &scene, &statement, reasoner, cfg, &mut transcripts)?;
            let here = cells_at(&grid, region.center());
            next.push(if sel == here { region.clone() } else { region_from_cells(&grid, &sel, &regions0.regions[i], &base.objects[0]) });
        }
        state = state.advance(state.semantic.clone(), Geometric::Grasp(GraspRegionSet { regions: next }), cfg.tolerance);
        states.push(state.clone());
    }
    let Geometric::Grasp(result) = state.geometric else { unreachable!("grasp state") };
    Ok(Adaptation { result, states, transcripts })
}

/// Target-side inputs of manipulation adaptation, all in the target master frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetContext {
    pub master: ObjectProperties,
    pub slave_start: Pose,
    /// Slave joint relative to its current coordinate, if articulated.
    pub articulation: Option<Kinematic>,
    pub task_delta: String,
}

impl TargetContext {
    /// Builds the context from a world; joint ranges are re-based at the current coordinate.
    pub fn from_world(world: &WorldState, master: &str, slave: &str, task_delta: &str) -> Option<Self> {
        let (m, s) = (world.object(master)?, world.object(slave)?);
        let inv = m.pose.inverse();
        let articulation = match &s.kinematic {
            Kinematic::Prismatic { axis, range } => Some(Kinematic::Prismatic {
                axis: inv.transform_vector(*axis),
                range: (range.0 - s.joint, range.1 - s.joint),
            }),
            Kinematic::Hinged { axis, origin, range } => Some(Kinematic::Hinged {
                axis: inv.transform_vector(*axis),
                origin: inv.transform_point(*origin),
                range: (range.0 - s.joint, range.1 - s.joint),
            }),
            _ => None,
        };
        Some(Self { master: m.props.clone(), slave_start: inv.mul_pose(&s.pose), articulation, task_delta: task_delta.into() })
    }
}

fn articulation_fact(k: &Kinematic) -> Option<serde_json::Value> {
    match k {
        Kinematic::Prismatic { axis, range } => Some(serde_json::json!({"type": "prismatic", "axis": axis, "range": range})),
        Kinematic::Hinged { axis, origin, range } => {
            Some(serde_json::json!({"type": "hinged", "axis": axis, "origin": origin, "range": range}))
        }
        _ => None,
    }
}

pub fn adapt_manipulation(
    reference: &Skill,
    target: &TargetContext,
    reasoner: &dyn Reasoner,
    cfg: &AdaptConfig,
) -> Result<Adaptation<TrajectoryProgram>, AdaptError> {
    let Some(prog0) = reference.program() else {
        return Err(AdaptError::Validation("manipulation adaptation needs a manipulation skill".into()));
    };
    let mut state = AdaptationState::initial(reference);
    let mut states = Vec::new();
    let mut transcripts = Vec::new();
    while state.iteration < cfg.max_iterations && !state.converged {
        let Geometric::Trajectory(current) = &state.geometric else { unreachable!("trajectory state") };
        let curve = current.curve(&target.master)?;
        let mut scene = Scene { objects: vec![SceneObject::from_props(&target.master, Pose::identity())], ..Default::default() };
        scene.keypoints = curve
            .sample(10)
            .iter()
            .enumerate()
            .map(|(i, p)| Keypoint { label: format!("k{}", i + 1), position: p.position })
            .collect();
        scene.set_fact("current_curve", &curve);
        scene.set_fact("slave_start", target.slave_start);
        scene.set_fact("trajectory_class", &current.trajectory_class);
        scene.set_fact("reference_statements", &state.reference_semantic.statements);
        scene.set_fact("task_delta", &target.task_delta);
        scene.set_fact("reference", &state.reference_scene);
        if let Some(a) = target.articulation.as_ref().and_then(articulation_fact) {
            scene.set_fact("articulation", a);
        }
        let q = ReasonerQuery::new(QueryKind::ManipulationComparison, scene)
            .with_context(vec![format!("task: {}", target.task_delta)]);
        let resp = match ask(reasoner, &q) {
            Err(ReasonerError::Schema { .. }) => ask(reasoner, &q)?,
            r => r?,
        };
        transcripts.push(resp.transcript.clone());
        let Payload::Manipulation { statements, trajectory_class, curve } = resp.payload else { unreachable!("validated kind") };
        let program = revise(&curve, target, &trajectory_class, prog0.waypoint_count)
            .or_else(|_| revise(&curve, target, &current.trajectory_class, prog0.waypoint_count))?;
        let semantic = SemanticConstraints { statements, trajectory_class: Some(trajectory_class), ..state.semantic.clone() };
        state = state.advance(semantic, Geometric::Trajectory(program), cfg.tolerance);
        states.push(state.clone());
    }
    let Geometric::Trajectory(result) = state.geometric else { unreachable!("trajectory state") };
    Ok(Adaptation { result, states, transcripts })
}

fn revise(curve: &Curve, target: &TargetContext, class: &str, count: usize) -> Result<TrajectoryProgram, AdaptError> {
    Ok(TrajectoryProgram::from_curve(curve, &target.master, class, count, 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureClass {
    GraspMiss,
    TrajectoryDeviation,
    NoEffect,
    Collision,
}

impl FailureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::GraspMiss => "grasp-miss",
            FailureClass::TrajectoryDeviation => "trajectory-deviation",
            FailureClass::NoEffect => "no-effect",
            FailureClass::Collision => "collision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub subtask: String,
    pub expected: Vec<Pose>,
    pub observed: Vec<Pose>,
    /// Object pose change over the failed attempt, keyed by object id.
    pub object_deltas: BTreeMap<String, Pose>,
    pub classification: Option<FailureClass>,
}

impl FailureReport {
    pub fn classified(
        subtask: &str,
        expected: Vec<Pose>,
        observed: Vec<Pose>,
        object_deltas: BTreeMap<String, Pose>,
        class: FailureClass,
    ) -> Self {
        Self { subtask: subtask.into(), expected, observed, object_deltas, classification: Some(class) }
    }
}

const MOVED_M: f64 = 0.01;
const MOVED_RAD: f64 = 0.05;

fn fallback_actions(class: FailureClass) -> Vec<CorrectiveAction> {
    match class {
        FailureClass::GraspMiss | FailureClass::NoEffect => vec![CorrectiveAction::ReGrasp],
        FailureClass::TrajectoryDeviation | FailureClass::Collision => vec![CorrectiveAction::RePlanTrajectory],
    }
}

/// Corrective actions for a failed attempt; `rounds_used` counts earlier corrections.
pub fn failure_reason(
    report: &FailureReport,
    skill: &Skill,
    reasoner: &dyn Reasoner,
    rounds_used: usize,
    max_rounds: usize,
) -> Vec<CorrectiveAction> {
    let Some(class) = report.classification else { return vec![CorrectiveAction::Abort] };
    if rounds_used >= max_rounds {
        return vec![CorrectiveAction::Abort];
    }
    let master_moved = report
        .object_deltas
        .get(&skill.master_id)
        .is_some_and(|d| d.position.norm() > MOVED_M || d.orientation.angle() > MOVED_RAD);
    let mut scene = Scene::default();
    scene.set_fact("classification", class.as_str());
    scene.set_fact("master_moved", master_moved);
    scene.set_fact("subtask", &report.subtask);
    let q = ReasonerQuery::new(QueryKind::FailureReasoning, scene).with_context(vec![report.subtask.clone()]);
    match ask(reasoner, &q) {
        Ok(ReasonerResponse { payload: Payload::Correction { actions, .. }, .. }) => {
            let actions: Vec<CorrectiveAction> = actions.into_iter().filter(|a| *a != CorrectiveAction::Abort).collect();
            if actions.is_empty() {
                fallback_actions(class)
            } else {
                actions
            }
        }
        _ => fallback_actions(class),
    }
}
