//! End-to-end runs on generated scenes: learn each template from a few
//! demonstrations, then plan, adapt and execute on fresh worlds.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, compose_task_delta, AdaptConfig, AdaptError, TargetContext};
use crate::bank::{BankError, BankHandle, ObjectSignature, PlanRecord, SkillRecord};
use crate::executor::{self, ExecConfig, ExecError, SkillBinding};
use crate::grounding::{ground_demo, GroundedDemo, GroundingConfig, GroundingError, Phase};
use crate::learner::{learn_skill, Demonstrated, LearnError};
use crate::reasoner::Reasoner;
use crate::simenv::{self, Environment, NoiseModel, TemplateId};
use crate::world::WorldState;
use crate::{ObjectProperties, HAND};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("demonstrations disagree: {0}")]
    Inconsistent(String),
}

/// Ids of what learning wrote into the bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learned {
    pub task_text: String,
    pub plan_id: String,
    pub skill_ids: Vec<String>,
}

pub fn signature(props: &ObjectProperties) -> ObjectSignature {
    ObjectSignature { name: props.object_id.clone(), bbox_extents: props.bbox_extents }
}

/// Learns a plan and one skill per subtask from grounded demonstrations of one task.
pub fn learn_from_grounded(demos: &[GroundedDemo], bank: &BankHandle, reasoner: &dyn Reasoner) -> Result<Learned, EvalError> {
    let first = demos.first().ok_or_else(|| EvalError::Inconsistent("no demonstrations".into()))?;
    let n = first.segments.len();
    if let Some(d) = demos.iter().find(|d| d.segments.len() != n || d.task.task_text != first.task.task_text) {
        return Err(EvalError::Inconsistent(format!("{} differs from {} in task or segment count", d.demo_id, first.demo_id)));
    }
    let mut skill_ids = Vec::with_capacity(n);
    let mut objects = BTreeSet::new();
    for k in 0..n {
        let group: Vec<Demonstrated<'_>> = demos
            .iter()
            .map(|d| Demonstrated { segment: &d.segments[k], interaction: &d.interactions[k], master: &d.masters[k] })
            .collect();
        let skill = learn_skill(&group, reasoner, None)?;
        for id in [&skill.master_id, &skill.slave_id] {
            if id != HAND {
                objects.insert(id.clone());
            }
        }
        let record = SkillRecord { subtask_text: skill.description.clone(), object: signature(&first.masters[k]), skill };
        skill_ids.push(bank.store_skill(&record)?);
    }
    let plan = PlanRecord {
        task_text: first.task.task_text.clone(),
        steps: first.segments.iter().map(|s| s.description.clone()).collect(),
        objects: objects.into_iter().collect(),
    };
    let plan_id = bank.store_plan(&plan)?;
    Ok(Learned { task_text: plan.task_text, plan_id, skill_ids })
}

/// Generates `count` noise-free demonstrations, grounds them and learns from them.
pub fn learn_template(
    template: TemplateId,
    count: usize,
    seed_base: u64,
    bank: &BankHandle,
    reasoner: &dyn Reasoner,
    cfg: &GroundingConfig,
) -> Result<Learned, EvalError> {
    let demos = (0..count as u64)
        .map(|i| {
            let demo = simenv::generate_demo(template, seed_base + i, NoiseModel::default());
            ground_demo(&demo.trace, reasoner, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    learn_from_grounded(&demos, bank, reasoner)
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("no stored skill matches step '{0}'")]
    NoSkill(String),
    #[error("plan has no manipulation step after '{0}'")]
    Incomplete(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub success: bool,
    pub rounds: usize,
    pub steps: Vec<String>,
    pub adaptation_iterations: Vec<usize>,
}

fn retrieve_for_step(bank: &BankHandle, world: &WorldState, step: &str) -> Result<(String, SkillRecord), RunError> {
    let mut best: Option<(f64, String, SkillRecord)> = None;
    for obj in world.objects.values() {
        for r in bank.retrieve_skill(step, &signature(&obj.props), 1)? {
            if !world.objects.contains_key(&r.record.skill.master_id) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((s, id, _)) => r.score > *s || (r.score == *s && r.id < *id),
            };
            if better {
                best = Some((r.score, r.id, r.record));
            }
        }
    }
    best.map(|(_, id, rec)| (id, rec)).ok_or_else(|| RunError::NoSkill(step.into()))
}

/// Plans, adapts and executes a task in `world`. Failure reasoning runs for
/// up to `adapt.failure_rounds` rounds.
pub fn run_task(
    task_text: &str,
    world: &mut WorldState,
    bank: &BankHandle,
    reasoner: &dyn Reasoner,
    adapt: &AdaptConfig,
    exec: &ExecConfig,
) -> Result<TaskRun, RunError> {
    let plan = adapter::plan_high_level(task_text, world, bank, reasoner)?;
    let mut rounds = 0;
    let mut iterations = Vec::new();
    let mut success = world.goal.is_none();
    let mut steps = plan.steps.iter();
    while let Some(step) = steps.next() {
        let (grasp_id, grasp_rec) = retrieve_for_step(bank, world, step)?;
        let grasp_skill = &grasp_rec.skill;
        if grasp_skill.phase != Phase::Grasping {
            continue;
        }
        let next = steps.next().ok_or_else(|| RunError::Incomplete(step.clone()))?;
        let (manip_id, manip_rec) = retrieve_for_step(bank, world, next)?;
        let manip = &manip_rec.skill;
        let target_obj = world.object(&grasp_skill.master_id).ok_or_else(|| RunError::NoSkill(step.clone()))?;
        let regions = adapter::adapt_grasp(grasp_skill, &target_obj.props, reasoner, adapt)?;
        iterations.push(regions.iterations());
        let props: Vec<&ObjectProperties> = plan.objects.iter().filter_map(|o| world.object(o).map(|w| &w.props)).collect();
        let delta = compose_task_delta(task_text, &props);
        let target = TargetContext::from_world(world, &manip.master_id, &manip.slave_id, &delta)
            .ok_or_else(|| RunError::NoSkill(next.clone()))?;
        let program = adapter::adapt_manipulation(manip, &target, reasoner, adapt)?;
        iterations.push(program.iterations());
        let skill_id = format!("{grasp_id}+{manip_id}");
        let binding = SkillBinding {
            skill_id: &skill_id,
            subtask: next,
            regions: &regions.result,
            program: &program.result,
            master: &manip.master_id,
            slave: &manip.slave_id,
        };
        let mut hook = |report: &adapter::FailureReport, used: usize| {
            adapter::failure_reason(report, manip, reasoner, used, adapt.failure_rounds)
        };
        let outcome = executor::select_and_execute(&binding, world, exec, Some(&mut hook))?;
        rounds += outcome.rounds;
        success = outcome.success;
        if outcome.aborted {
            success = false;
            break;
        }
    }
    Ok(TaskRun { success, rounds, steps: plan.steps, adaptation_iterations: iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub template: String,
    pub environment: String,
    pub successes: usize,
    pub trials: usize,
    /// Runs that ended in an error before execution finished.
    pub errors: usize,
}

impl EvalRow {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, template: TemplateId, env: Environment) -> Option<&EvalRow> {
        let (t, e) = (template.to_string(), env_name(env));
        self.rows.iter().find(|r| r.template == t && r.environment == e)
    }

    pub fn total(&self, env: Environment) -> (usize, usize) {
        let e = env_name(env);
        self.rows.iter().filter(|r| r.environment == e).fold((0, 0), |(s, t), r| (s + r.successes, t + r.trials))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:<8} {:>9} {:>6}", "template", "env", "success", "rate");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:<8} {:>9} {:>6.2}",
                r.template,
                r.environment,
                format!("{}/{}", r.successes, r.trials),
                r.rate()
            );
        }
        out
    }
}

pub fn env_name(env: Environment) -> &'static str {
    match env {
        Environment::Seen => "seen",
        Environment::Unseen => "unseen",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub templates: Vec<TemplateId>,
    pub environments: Vec<Environment>,
    pub seeds: usize,
    pub seed_base: u64,
    pub adapt: AdaptConfig,
    pub exec: ExecConfig,
}

/// Runs every template on `seeds` fresh worlds per environment. Skills must
/// already be in the bank.
pub fn evaluate(spec: &EvalSpec, bank: &BankHandle, reasoner: &dyn Reasoner) -> EvalTable {
    let mut rows = Vec::new();
    for &template in &spec.templates {
        for &env in &spec.environments {
            let mut row =
                EvalRow { template: template.to_string(), environment: env_name(env).into(), successes: 0, trials: 0, errors: 0 };
            for s in 0..spec.seeds as u64 {
                let seed = spec.seed_base + s;
                let mut world = simenv::build_world_in(template, seed, env);
                let exec = ExecConfig { seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ template.index(), ..spec.exec.clone() };
                row.trials += 1;
                match run_task(template.task_text(), &mut world, bank, reasoner, &spec.adapt, &exec) {
                    Ok(run) if run.success && simenv::judge(&world, template) => row.successes += 1,
                    Ok(_) => {}
                    Err(e) => {
                        log::warn!("{template} seed {seed} ({}): {e}", env_name(env));
                        row.errors += 1;
                    }
                }
            }
            rows.push(row);
        }
    }
    EvalTable { rows }
}

/// Learns every template into `bank` from `demos` noise-free demonstrations each.
pub fn learn_all(
    templates: &[TemplateId],
    demos: usize,
    seed_base: u64,
    bank: &BankHandle,
    reasoner: &dyn Reasoner,
    cfg: &GroundingConfig,
) -> Result<Vec<Learned>, EvalError> {
    templates.iter().map(|&t| learn_template(t, demos, seed_base, bank, reasoner, cfg)).collect()
}

/// Unseen success with and without failure reasoning under injected grasp misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureAblation {
    pub miss_rate: f64,
    pub with_rounds: usize,
    pub with_rounds_table: EvalTable,
    pub without_table: EvalTable,
}

impl FailureAblation {
    pub fn successes(&self) -> (usize, usize) {
        (self.with_rounds_table.total(Environment::Unseen).0, self.without_table.total(Environment::Unseen).0)
    }
}

pub fn failure_ablation(spec: &EvalSpec, miss_rate: f64, bank: &BankHandle, reasoner: &dyn Reasoner) -> FailureAblation {
    let base = EvalSpec {
        environments: vec![Environment::Unseen],
        exec: ExecConfig { grasp_miss_rate: miss_rate, ..spec.exec.clone() },
        ..spec.clone()
    };
    let with = evaluate(&base, bank, reasoner);
    let without_spec = EvalSpec { adapt: AdaptConfig { failure_rounds: 0, ..base.adapt.clone() }, ..base };
    let without = evaluate(&without_spec, bank, reasoner);
    FailureAblation { miss_rate, with_rounds: spec.adapt.failure_rounds, with_rounds_table: with, without_table: without }
}
