use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use skillgraft::adapter::{self, compose_task_delta, TargetContext};
use skillgraft::bank::BankHandle;
use skillgraft::config::{Backend, Config};
use skillgraft::evaluation::{self, EvalSpec};
use skillgraft::grounding::{ground_demo, GroundedDemo, Phase};
use skillgraft::reasoner::Reasoner;
use skillgraft::simenv::{self, Environment, NoiseModel, TemplateId};
use skillgraft::trace::{read_trace, write_trace};

const GROUNDED_SCHEMA_VERSION: u32 = 1;

macro_rules! out {
    ($($t:tt)*) => { writeln!(std::io::stdout().lock(), $($t)*)? };
}

macro_rules! outr {
    ($($t:tt)*) => { write!(std::io::stdout().lock(), $($t)*)? };
}

#[derive(Parser)]
#[command(name = "skillgraft", version, about = "Learn, adapt and execute manipulation skills from perception traces")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Knowledge bank directory.
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
    /// Reasoner backend: scripted or remote.
    #[arg(long, global = true)]
    reasoner: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Adaptation iteration cap.
    #[arg(long = "iterations", global = true)]
    max_iterations: Option<usize>,
    #[arg(long, global = true)]
    grid_m: Option<usize>,
    #[arg(long, global = true)]
    grid_n: Option<usize>,
    /// Grid-cell samples per region query.
    #[arg(long = "samples", global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    candidates: Option<usize>,
    #[arg(long, global = true)]
    failure_rounds: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic demonstration traces.
    GenDemos(GenDemos),
    /// Segment traces into subtasks and extract interactions.
    Ground(Ground),
    /// Learn skills from a grounded file and store them in the bank.
    Learn(Learn),
    /// Plan and adapt stored skills to a generated world.
    Adapt(WorldArgs),
    /// Plan, adapt and execute a task in a generated world.
    Execute(WorldArgs),
    /// Success-rate table over templates and seeds.
    Evaluate(Evaluate),
    /// Inspect the knowledge bank.
    #[command(subcommand)]
    Bank(BankCmd),
}

#[derive(Args)]
struct GenDemos {
    #[arg(long)]
    template: String,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "demos")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pose_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    cloud_sigma: f64,
    #[arg(long)]
    unseen: bool,
}

#[derive(Args)]
struct Ground {
    /// Trace files.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value = "grounded.json")]
    out: PathBuf,
}

#[derive(Args)]
struct Learn {
    /// File written by `ground`.
    grounded: PathBuf,
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long)]
    template: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    unseen: bool,
    /// Task text; defaults to the template's task.
    #[arg(long)]
    task: Option<String>,
    /// Write the result as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    /// Comma-separated template names.
    #[arg(long, value_delimiter = ',', default_values_t = TemplateId::DEFAULT_SET.map(|t| t.to_string()))]
    templates: Vec<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// Demonstrations to learn from per template not yet in the bank.
    #[arg(long)]
    demos: Option<usize>,
    /// Also run unseen worlds without failure reasoning under injected grasp misses.
    #[arg(long)]
    ablation: bool,
    /// Write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BankCmd {
    /// One line per stored record.
    List,
    /// Print a record file.
    Inspect { id: String },
}

#[derive(Serialize, Deserialize)]
struct GroundedFile {
    schema_version: u32,
    demos: Vec<GroundedDemo>,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(b) = &cli.bank {
        cfg.bank_root = b.clone();
    }
    if let Some(r) = &cli.reasoner {
        cfg.reasoner.backend = match r.as_str() {
            "scripted" => Backend::Scripted,
            "remote" => Backend::Remote,
            other => bail!("unknown reasoner '{other}'; valid: scripted, remote"),
        };
    }
    let g = &mut cfg.grounding;
    g.epsilon = cli.epsilon.unwrap_or(g.epsilon);
    g.gamma = cli.gamma.unwrap_or(g.gamma);
    let a = &mut cfg.adapt;
    a.max_iterations = cli.max_iterations.unwrap_or(a.max_iterations);
    a.grid_m = cli.grid_m.unwrap_or(a.grid_m);
    a.grid_n = cli.grid_n.unwrap_or(a.grid_n);
    a.samples = cli.samples.unwrap_or(a.samples);
    a.failure_rounds = cli.failure_rounds.unwrap_or(a.failure_rounds);
    cfg.exec.n_candidates = cli.candidates.unwrap_or(cfg.exec.n_candidates);
    cfg.validate()?;
    Ok(cfg)
}

fn template(name: &str) -> Result<TemplateId> {
    Ok(name.parse::<TemplateId>()?)
}

fn open_existing_bank(root: &Path) -> Result<BankHandle> {
    if !root.is_dir() {
        bail!(
            "bank directory '{}' does not exist; create it with `skillgraft learn <grounded.json>` or `skillgraft evaluate`, or pass --bank",
            root.display()
        );
    }
    Ok(BankHandle::open(root)?)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => out!("{text}"),
    }
    Ok(())
}

fn gen_demos(args: &GenDemos) -> Result<()> {
    let t = template(&args.template)?;
    if args.pose_sigma < 0.0 || args.cloud_sigma < 0.0 {
        bail!("noise sigmas must be non-negative");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let noise = NoiseModel { pose_sigma_m: args.pose_sigma, cloud_sigma_m: args.cloud_sigma };
    let env = if args.unseen { Environment::Unseen } else { Environment::Seen };
    for i in 0..args.count as u64 {
        let demo = simenv::generate_demo_in(t, args.seed + i, noise, env);
        let path = args.out.join(format!("{}.trace.jsonl", demo.trace.demo_id));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_trace(&demo.trace, &mut w)?;
        w.flush()?;
        let truth = args.out.join(format!("{}.truth.json", demo.trace.demo_id));
        fs::write(&truth, serde_json::to_string_pretty(&demo.ground_truth)?)?;
        out!("{}", path.display());
    }
    Ok(())
}

fn ground(args: &Ground, cfg: &Config, reasoner: &dyn Reasoner) -> Result<()> {
    let mut demos = Vec::new();
    for p in &args.traces {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let trace = read_trace(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
        let g = ground_demo(&trace, reasoner, &cfg.grounding).with_context(|| format!("grounding {}", trace.demo_id))?;
        for s in &g.segments {
            out!("{} {:>4}..{:<4} {:<12} {} -> {}: {}", g.demo_id, s.start_frame, s.end_frame, phase(s.phase), s.slave_id, s.master_id, s.description);
        }
        demos.push(g);
    }
    emit(&GroundedFile { schema_version: GROUNDED_SCHEMA_VERSION, demos }, Some(&args.out))
}

fn phase(p: Phase) -> &'static str {
    match p {
        Phase::Grasping => "grasping",
        Phase::Manipulation => "manipulation",
    }
}

fn learn(args: &Learn, cfg: &Config, reasoner: &dyn Reasoner) -> Result<()> {
    let text = fs::read_to_string(&args.grounded).with_context(|| format!("reading {}", args.grounded.display()))?;
    let file: GroundedFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.grounded.display()))?;
    if file.schema_version != GROUNDED_SCHEMA_VERSION {
        bail!("unsupported grounded file schema version {}", file.schema_version);
    }
    let bank = BankHandle::open(&cfg.bank_root)?;
    let mut by_task: Vec<(String, Vec<GroundedDemo>)> = Vec::new();
    for d in file.demos {
        match by_task.iter_mut().find(|(t, _)| *t == d.task.task_text) {
            Some((_, v)) => v.push(d),
            None => by_task.push((d.task.task_text.clone(), vec![d])),
        }
    }
    for (_, demos) in by_task {
        let learned = evaluation::learn_from_grounded(&demos, &bank, reasoner)?;
        out!("plan  {} {}", learned.plan_id, learned.task_text);
        for id in learned.skill_ids {
            out!("skill {id}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport {
    task: String,
    steps: Vec<String>,
    grasp_regions: Option<skillgraft::learner::GraspRegionSet>,
    grasp_iterations: usize,
    program: Option<skillgraft::learner::TrajectoryProgram>,
    program_iterations: usize,
}

fn world_for(args: &WorldArgs) -> Result<(TemplateId, skillgraft::world::WorldState, String)> {
    let t = template(&args.template)?;
    let env = if args.unseen { Environment::Unseen } else { Environment::Seen };
    let task = args.task.clone().unwrap_or_else(|| t.task_text().to_string());
    Ok((t, simenv::build_world_in(t, args.seed, env), task))
}

fn adapt(args: &WorldArgs, cfg: &Config, reasoner: &dyn Reasoner) -> Result<()> {
    let bank = open_existing_bank(&cfg.bank_root)?;
    let (_, world, task) = world_for(args)?;
    let plan = adapter::plan_high_level(&task, &world, &bank, reasoner)?;
    let mut report = AdaptReport {
        task: task.clone(),
        steps: plan.steps.clone(),
        grasp_regions: None,
        grasp_iterations: 0,
        program: None,
        program_iterations: 0,
    };
    for step in &plan.steps {
        let Some((sig_obj, rec)) = world
            .objects
            .values()
            .filter_map(|o| {
                let r = bank.retrieve_skill(step, &evaluation::signature(&o.props), 1).ok()?.into_iter().next()?;
                Some((o, r))
            })
            .max_by(|a, b| a.1.score.total_cmp(&b.1.score))
        else {
            bail!("no stored skill for step '{step}'");
        };
        let skill = &rec.record.skill;
        match skill.phase {
            Phase::Grasping => {
                let target = world.object(&skill.master_id).unwrap_or(sig_obj);
                let a = adapter::adapt_grasp(skill, &target.props, reasoner, &cfg.adapt)?;
                report.grasp_iterations = a.iterations();
                report.grasp_regions = Some(a.result);
            }
            Phase::Manipulation => {
                let props: Vec<_> = plan.objects.iter().filter_map(|o| world.object(o).map(|w| &w.props)).collect();
                let delta = compose_task_delta(&task, &props);
                let ctx = TargetContext::from_world(&world, &skill.master_id, &skill.slave_id, &delta)
                    .with_context(|| format!("objects of '{step}' missing from the world"))?;
                let a = adapter::adapt_manipulation(skill, &ctx, reasoner, &cfg.adapt)?;
                report.program_iterations = a.iterations();
                report.program = Some(a.result);
            }
        }
    }
    emit(&report, args.out.as_deref())
}

fn execute(args: &WorldArgs, cfg: &Config, reasoner: &dyn Reasoner) -> Result<()> {
    let bank = open_existing_bank(&cfg.bank_root)?;
    let (t, mut world, task) = world_for(args)?;
    let exec = skillgraft::executor::ExecConfig { seed: cfg.exec.seed ^ args.seed, ..cfg.exec.clone() };
    let run = evaluation::run_task(&task, &mut world, &bank, reasoner, &cfg.adapt, &exec)?;
    let judged = simenv::judge(&world, t);
    emit(&serde_json::json!({ "task": task, "run": run, "success": judged }), args.out.as_deref())
}

fn evaluate(args: &Evaluate, cfg: &Config, reasoner: &dyn Reasoner) -> Result<()> {
    let templates = args.templates.iter().map(|n| template(n)).collect::<Result<Vec<_>>>()?;
    let bank = BankHandle::open(&cfg.bank_root)?;
    let demos = args.demos.unwrap_or(cfg.evaluation.demos);
    for &t in &templates {
        let known = bank.retrieve_plan(t.task_text(), 1)?.first().is_some_and(|r| r.score >= 1.0);
        if !known {
            log::info!("learning {t} from {demos} demonstrations");
            evaluation::learn_template(t, demos, cfg.evaluation.demo_seed_base, &bank, reasoner, &cfg.grounding)?;
        }
    }
    let spec = EvalSpec {
        templates,
        environments: vec![Environment::Seen, Environment::Unseen],
        seeds: args.seeds.unwrap_or(cfg.evaluation.seeds),
        seed_base: args.seed_base,
        adapt: cfg.adapt.clone(),
        exec: cfg.exec.clone(),
    };
    let table = evaluation::evaluate(&spec, &bank, reasoner);
    outr!("{}", table.to_text());
    let ablation = args.ablation.then(|| evaluation::failure_ablation(&spec, cfg.evaluation.grasp_miss_rate, &bank, reasoner));
    if let Some(a) = &ablation {
        let (with, without) = a.successes();
        out!(
            "unseen with {} failure rounds under {:.0}% grasp misses: {with}; without: {without}",
            a.with_rounds,
            a.miss_rate * 100.0
        );
    }
    if let Some(p) = &args.json {
        emit(&serde_json::json!({ "table": table, "ablation": ablation }), Some(p))?;
    }
    Ok(())
}

fn bank_cmd(cmd: &BankCmd, cfg: &Config) -> Result<()> {
    let bank = open_existing_bank(&cfg.bank_root)?;
    match cmd {
        BankCmd::List => {
            for e in bank.entries() {
                let kind = match e.kind {
                    skillgraft::bank::RecordKind::Plan => "plan ",
                    skillgraft::bank::RecordKind::Skill => "skill",
                };
                out!("{kind} {} {}", e.id, e.key);
            }
        }
        BankCmd::Inspect { id } => outr!("{}", bank.inspect(id)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let reasoner = || cfg.build_reasoner();
    match &cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Ground(a) => ground(a, &cfg, reasoner()?.as_ref()),
        Command::Learn(a) => learn(a, &cfg, reasoner()?.as_ref()),
        Command::Adapt(a) => adapt(a, &cfg, reasoner()?.as_ref()),
        Command::Execute(a) => execute(a, &cfg, reasoner()?.as_ref()),
        Command::Evaluate(a) => evaluate(a, &cfg, reasoner()?.as_ref()),
        Command::Bank(c) => bank_cmd(c, &cfg),
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
