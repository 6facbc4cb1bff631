//! Sample grasp candidates, turn programs into end-effector paths, score
//! them against obstacles and joint limits, and run the best one.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{FailureClass, FailureReport};
use crate::learner::{GraspRegionSet, TrajectoryProgram};
use crate::reasoner::CorrectiveAction;
use crate::world::{Kinematic, WorldState};
use crate::{ObjectProperties, Pose, Quat, Vec3};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no feasible plan")]
    NoFeasiblePlan,
    #[error("non-finite pose while composing the trajectory")]
    NonFinite,
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("program evaluation failed: {0}")]
    Program(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub n_candidates: usize,
    pub seed: u64,
    pub pregrasp_offset_m: f64,
    pub grasp_pos_tol_m: f64,
    pub grasp_ang_tol_deg: f64,
    /// Probability that an executed grasp lands off target.
    pub grasp_miss_rate: f64,
    /// Number of leading attempts whose grasp is forced to miss.
    pub forced_misses: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            n_candidates: 32,
            seed: 0,
            pregrasp_offset_m: 0.08,
            grasp_pos_tol_m: 0.01,
            grasp_ang_tol_deg: 15.0,
            grasp_miss_rate: 0.0,
            forced_misses: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub candidate: usize,
    pub grasp: Pose,
    /// Pregrasp, grasp, then the manipulation waypoints.
    pub ee_trajectory: Vec<Pose>,
    pub score: f64,
    pub skill_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub success: bool,
    pub rounds: usize,
    pub plan: ExecutionPlan,
    pub failures: Vec<FailureReport>,
    pub actions: Vec<Vec<CorrectiveAction>>,
    pub aborted: bool,
}

fn unit_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Quat {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    let axis = Vec3::new(r * phi.cos(), r * phi.sin(), z);
    let angle = max_angle * rng.gen::<f64>().cbrt();
    Quat::from_axis_angle(axis, angle)
}

/// World-frame grasp candidates drawn uniformly from the regions on a master.
pub fn sample_grasps<R: Rng>(
    regions: &GraspRegionSet,
    master_pose: &Pose,
    master: &ObjectProperties,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Pose>, ExecError> {
    if n == 0 || regions.regions.is_empty() {
        return Err(ExecError::Invalid("need n >= 1 and at least one region".into()));
    }
    let volume = |r: &crate::learner::Region| {
        let d = r.position_hi - r.position_lo;
        (d.x * d.y * d.z).max(0.0)
    };
    let weights: Vec<f64> = regions.regions.iter().map(volume).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            weights.iter().position(|w| {
                t -= w;
                t < 0.0
            })
            .unwrap_or(weights.len() - 1)
        } else {
            rng.gen_range(0..regions.regions.len())
        };
        let r = &regions.regions[idx];
        let pos = if weights[idx] > 0.0 {
            Vec3::new(
                rng.gen_range(r.position_lo.x..=r.position_hi.x),
                rng.gen_range(r.position_lo.y..=r.position_hi.y),
                rng.gen_range(r.position_lo.z..=r.position_hi.z),
            )
        } else {
            r.center()
        };
        let cone = r.orientation_cone_deg.clamp(0.0, 180.0).to_radians();
        let q = unit_rotation(rng, cone).mul_quat(r.orientation_ref);
        let local = Pose { position: master.denormalize(pos), orientation: q };
        out.push(master_pose.mul_pose(&local));
    }
    Ok(out)
}

/// `master ∘ rel(t) ∘ grasp_in_slave` for every relative waypoint.
pub fn instantiate_world_trajectory(rel: &[Pose], master_pose: &Pose, grasp_in_slave: &Pose) -> Result<Vec<Pose>, ExecError> {
    let out: Vec<Pose> = rel.iter().map(|r| master_pose.mul_pose(r).mul_pose(grasp_in_slave)).collect();
    if out.iter().all(Pose::is_finite) {
        Ok(out)
    } else {
        Err(ExecError::NonFinite)
    }
}

/// Held object constraint applied while scoring: waypoints from `from` on
/// carry `object` with the gripper at `grasp_in_object`.
#[derive(Debug, Clone)]
pub struct HeldConstraint<'a> {
    pub object: &'a str,
    pub grasp_in_object: Pose,
    pub from: usize,
}

const JOINT_SLACK: f64 = 1e-3;
const JOINT_POSITION_TOL_M: f64 = 0.02;

fn joint_ok(world: &WorldState, held: &HeldConstraint<'_>, ee: &Pose) -> bool {
    let Some(obj) = world.object(held.object) else { return false };
    let desired = ee.mul_pose(&held.grasp_in_object.inverse());
    match &obj.kinematic {
        Kinematic::Hinged { range, .. } | Kinematic::Prismatic { range, .. } => {
            let Some(q) = obj.project_joint(desired.position) else { return false };
            if q < range.0 - JOINT_SLACK || q > range.1 + JOINT_SLACK {
                return false;
            }
            obj.pose_at(q).1.position.distance(desired.position) <= JOINT_POSITION_TOL_M
        }
        Kinematic::Fixed => obj.pose.position.distance(desired.position) <= JOINT_POSITION_TOL_M,
        Kinematic::Free => true,
    }
}

/// Fraction of leading waypoints reachable by collision-free straight sweeps.
pub fn score_trajectory(traj: &[Pose], world: &WorldState) -> f64 {
    score_trajectory_holding(traj, world, None)
}

pub fn score_trajectory_holding(traj: &[Pose], world: &WorldState, held: Option<&HeldConstraint<'_>>) -> f64 {
    if traj.is_empty() {
        return 0.0;
    }
    let mut ok = 0usize;
    for (i, p) in traj.iter().enumerate() {
        let free = if i == 0 {
            !world.obstacles.iter().any(|o| o.contains(p.position))
        } else {
            !world.obstacles.iter().any(|o| o.intersects_segment(traj[i - 1].position, p.position))
        };
        let kin = held.is_none_or(|h| i < h.from || joint_ok(world, h, p));
        if !(free && kin) {
            break;
        }
        ok += 1;
    }
    ok as f64 / traj.len() as f64
}

/// Index of the highest score, lowest index on ties.
pub fn argmax_score(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// What to run: grasp regions on the slave and the adapted program relative to the master.
pub struct SkillBinding<'a> {
    pub skill_id: &'a str,
    pub subtask: &'a str,
    pub regions: &'a GraspRegionSet,
    pub program: &'a TrajectoryProgram,
    pub master: &'a str,
    pub slave: &'a str,
}

fn pregrasp(grasp: &Pose, offset: f64) -> Pose {
    grasp.mul_pose(&Pose::from_translation(Vec3::new(0.0, 0.0, -offset)))
}

fn plan_candidates(
    binding: &SkillBinding<'_>,
    world: &WorldState,
    cfg: &ExecConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ExecutionPlan>, ExecError> {
    let master = world.object(binding.master).ok_or_else(|| ExecError::UnknownObject(binding.master.into()))?;
    let slave = world.object(binding.slave).ok_or_else(|| ExecError::UnknownObject(binding.slave.into()))?;
    let rel = binding.program.evaluate(&master.props).map_err(|e| ExecError::Program(e.to_string()))?;
    let grasps = sample_grasps(binding.regions, &slave.pose, &slave.props, cfg.n_candidates, rng)?;
    let slave_inv = slave.pose.inverse();
    let mut plans: Vec<ExecutionPlan> = grasps
        .into_iter()
        .enumerate()
        .map(|(i, grasp)| {
            let in_slave = slave_inv.mul_pose(&grasp);
            let mut ee = vec![pregrasp(&grasp, cfg.pregrasp_offset_m), grasp];
            ee.extend(instantiate_world_trajectory(&rel, &master.pose, &in_slave)?);
            Ok(ExecutionPlan { candidate: i, grasp, ee_trajectory: ee, score: 0.0, skill_id: binding.skill_id.into() })
        })
        .collect::<Result<_, ExecError>>()?;
    plans.par_iter_mut().for_each(|p| {
        let held = HeldConstraint { object: binding.slave, grasp_in_object: slave_inv.mul_pose(&p.grasp), from: 2 };
        p.score = score_trajectory_holding(&p.ee_trajectory, world, Some(&held));
    });
    Ok(plans)
}

/// Chooses corrective actions for a failure given the rounds already used.
pub type FailureHook<'a> = &'a mut dyn FnMut(&FailureReport, usize) -> Vec<CorrectiveAction>;

/// Runs the best candidate; on failure asks `failure_hook` for corrective
/// actions and retries until success, abort, or the hook gives up.
pub fn select_and_execute(
    binding: &SkillBinding<'_>,
    world: &mut WorldState,
    cfg: &ExecConfig,
    mut failure_hook: Option<FailureHook<'_>>,
) -> Result<ExecutionOutcome, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let home = world.gripper.pose;
    let mut failures = Vec::new();
    let mut actions = Vec::new();
    let mut round = 0usize;
    loop {
        round += 1;
        let plans = plan_candidates(binding, world, cfg, &mut rng)?;
        let scores: Vec<f64> = plans.iter().map(|p| p.score).collect();
        let best = argmax_score(&scores).expect("at least one candidate");
        if scores[best] <= 0.0 {
            return Err(ExecError::NoFeasiblePlan);
        }
        let plan = plans[best].clone();
        let before: BTreeMap<String, Pose> = world.objects.iter().map(|(k, o)| (k.clone(), o.pose)).collect();
        let miss = round <= cfg.forced_misses || rng.gen::<f64>() < cfg.grasp_miss_rate;
        let report = run_plan(binding, world, cfg, &plan, miss, &before);
        let success = report.is_none() && world.judge();
        if success || world.goal.is_none() && report.is_none() {
            return Ok(ExecutionOutcome { success, rounds: round, plan, failures, actions, aborted: false });
        }
        let report = report.unwrap_or_else(|| {
            let deltas = pose_deltas(&before, world);
            FailureReport::classified(binding.subtask, plan.ee_trajectory.clone(), vec![world.gripper.pose], deltas, FailureClass::TrajectoryDeviation)
        });
        let chosen = match failure_hook.as_mut() {
            Some(hook) => hook(&report, round - 1),
            None => vec![CorrectiveAction::Abort],
        };
        failures.push(report);
        actions.push(chosen.clone());
        world.open_gripper();
        world.move_gripper(home);
        if chosen.is_empty() || chosen.contains(&CorrectiveAction::Abort) {
            return Ok(ExecutionOutcome { success: false, rounds: round, plan, failures, actions, aborted: true });
        }
    }
}

fn pose_deltas(before: &BTreeMap<String, Pose>, world: &WorldState) -> BTreeMap<String, Pose> {
    before
        .iter()
        .filter_map(|(k, p)| world.object(k).map(|o| (k.clone(), p.inverse().mul_pose(&o.pose))))
        .collect()
}

const MISS_OFFSET_M: f64 = 0.05;
const DEVIATION_M: f64 = 0.05;

/// Executes one plan kinematically; returns a failure report if something went wrong.
fn run_plan(
    binding: &SkillBinding<'_>,
    world: &mut WorldState,
    cfg: &ExecConfig,
    plan: &ExecutionPlan,
    miss: bool,
    before: &BTreeMap<String, Pose>,
) -> Option<FailureReport> {
    let traj = &plan.ee_trajectory;
    let feasible = ((plan.score * traj.len() as f64).round() as usize).min(traj.len());
    let mut grasp = plan.grasp;
    if miss {
        grasp = grasp.mul_pose(&Pose::from_translation(Vec3::new(0.0, 0.0, -MISS_OFFSET_M)));
    }
    world.move_gripper(traj[0]);
    world.move_gripper(grasp);
    let target = world.grasp_target(&grasp, cfg.grasp_pos_tol_m, cfg.grasp_ang_tol_deg.to_radians());
    let hit = target.as_deref() == Some(binding.slave);
    world.close_gripper(hit.then_some(binding.slave));
    let mut observed = vec![world.gripper.pose];
    if !hit {
        let deltas = pose_deltas(before, world);
        return Some(FailureReport::classified(binding.subtask, traj.clone(), observed, deltas, FailureClass::GraspMiss));
    }
    for p in &traj[2..feasible.max(2)] {
        world.move_gripper(*p);
        observed.push(world.gripper.pose);
    }
    let expected_end = traj.last().expect("non-empty trajectory");
    let slave_end = world.object(binding.slave).map(|o| o.pose);
    world.open_gripper();
    world.move_gripper(pregrasp(&world.gripper.pose, cfg.pregrasp_offset_m));
    let deltas = pose_deltas(before, world);
    if feasible < traj.len() {
        return Some(FailureReport::classified(binding.subtask, traj.clone(), observed, deltas, FailureClass::Collision));
    }
    let moved = deltas.get(binding.slave).is_some_and(|d| d.position.norm() > 1e-3 || d.orientation.angle() > 1e-3);
    if !moved {
        return Some(FailureReport::classified(binding.subtask, traj.clone(), observed, deltas, FailureClass::NoEffect));
    }
    let last_seen = observed.last().expect("grasp recorded");
    if last_seen.position.distance(expected_end.position) > DEVIATION_M && slave_end.is_some() {
        return Some(FailureReport::classified(binding.subtask, traj.clone(), observed, deltas, FailureClass::TrajectoryDeviation));
    }
    None
}
