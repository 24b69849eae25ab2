//! `skillroute`: command-line driver for the handbook pipeline.
//!
//! Every command reads an optional TOML config, applies flag overrides,
//! writes its artifacts under `--out`, and writes `report.json` carrying the
//! command, the config hash and the input/output handbook versions. Failures
//! print a JSON error object to stderr and exit with 2 (config), 3 (data)
//! or 4 (environment).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use skillroute_core::config::{Config, ConfigError};
use skillroute_core::gateway::{GatewayEnvironment, HttpTransport};
use skillroute_core::handbook::{self, Handbook, HandbookError};
use skillroute_core::learner::{load_bundles, save_bundles, LearnError};
use skillroute_core::metrics::{evaluate, pareto_csv, MetricsError};
use skillroute_core::pipeline::{dry_run, PipelineError, Split, Workbench};
use skillroute_core::refiner::RefineError;
use skillroute_core::router::{run_episodes, Router, RouterError, Selection};
use skillroute_core::selector::SelectError;
use skillroute_core::simulator::{generate_world, load_spec, LatentWorld, SimError, SimQuery};
use skillroute_core::trajectory::{load_jsonl, save_jsonl, to_json_line, LogError, Query};

// ── Flags ───────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "skillroute", version, about = "Learn a skill handbook and route agents with it")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overall cost weight. `select` accepts it repeatedly for a sweep.
    #[arg(long, global = true)]
    lambda: Vec<f64>,
    /// Per-step cost weight in the routing utility.
    #[arg(long = "lambda-c", global = true)]
    lambda_c: Option<f64>,
    #[arg(long = "max-turns", global = true)]
    max_turns: Option<usize>,
    /// World spec (TOML or JSON) or a world file written by `simulate`.
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    /// Input handbook; defaults to the world's initial handbook.
    #[arg(long, global = true)]
    handbook: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Route without calling any environment.
    #[arg(long = "dry-run", global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every training query once per candidate agent and write bundles.
    Simulate {
        #[arg(long)]
        queries: Option<usize>,
    },
    /// Discover skills, build profiles and distill insights.
    Learn {
        /// `bundles.jsonl` written by `simulate`.
        #[arg(long)]
        bundles: PathBuf,
    },
    /// Split and merge skills of a learned handbook.
    Refine {
        #[arg(long)]
        bundles: PathBuf,
    },
    /// Pick the best handbook variant for each λ.
    Select,
    /// Route a query split and log the trajectories.
    Route {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "handbook")]
        strategy: Strategy,
    },
    /// Metrics over one or more trajectory logs.
    Eval {
        /// `label=path` or `path` (label = file stem). Repeatable.
        #[arg(long = "trajectories", required = true)]
        trajectories: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Handbook,
    Random,
    BestOverall,
}

// ── Errors ──────────────────────────────────────────────────────────────

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(m: impl ToString) -> Self {
        Self { code: 2, kind: "config", message: m.to_string() }
    }
    fn data(m: impl ToString) -> Self {
        Self { code: 3, kind: "data", message: m.to_string() }
    }
    fn env(m: impl ToString) -> Self {
        Self { code: 4, kind: "environment", message: m.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Spec(_) => Self::config(e),
            _ => Self::data(e),
        }
    }
}

impl From<HandbookError> for Failure {
    fn from(e: HandbookError) -> Self {
        Self::data(e)
    }
}

impl From<LogError> for Failure {
    fn from(e: LogError) -> Self {
        Self::data(e)
    }
}

impl From<LearnError> for Failure {
    fn from(e: LearnError) -> Self {
        Self::data(e)
    }
}

impl From<RefineError> for Failure {
    fn from(e: RefineError) -> Self {
        Self::data(e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::data(e)
    }
}

impl From<RouterError> for Failure {
    fn from(e: RouterError) -> Self {
        Self::env(e)
    }
}

impl From<SelectError> for Failure {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::EmptyValidation | SelectError::InvalidVariant { .. } => Self::data(e),
            _ => Self::env(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => e.into(),
            PipelineError::World(e) => e.into(),
            PipelineError::Router(e) => e.into(),
            PipelineError::Learn(e) => e.into(),
            PipelineError::Refine(e) => e.into(),
            PipelineError::Select(e) => e.into(),
            PipelineError::Metrics(e) => e.into(),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

// ── Setup ───────────────────────────────────────────────────────────────

fn load_config(c: &Common) -> Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(l) = c.lambda_c {
        cfg.router.lambda_c = l;
    }
    if let Some(t) = c.max_turns {
        cfg.router.max_turns = t;
    }
    if !c.lambda.is_empty() {
        cfg.select.lambdas = c.lambda.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--world` may name a generated world (JSON) or a spec (TOML/JSON).
fn load_world(c: &Common, cfg: &mut Config) -> Result<LatentWorld, Failure> {
    let Some(path) = &c.world else {
        return Ok(generate_world(&cfg.world, cfg.seed)?);
    };
    if let Ok(w) = LatentWorld::load(path) {
        cfg.world = w.spec.clone();
        return Ok(w);
    }
    cfg.world = load_spec(path).map_err(|e| match e {
        SimError::Io(_) => Failure::data(e),
        other => Failure::config(other),
    })?;
    cfg.validate()?;
    Ok(generate_world(&cfg.world, cfg.seed)?)
}

fn input_handbook(c: &Common, wb: &Workbench) -> Result<Handbook, Failure> {
    match &c.handbook {
        Some(p) => Ok(handbook::load(p)?),
        None => Ok(wb.initial_handbook()),
    }
}

/// The training query table saved next to the bundles, when present.
fn bundle_queries(bundles: &Path) -> Result<Option<Vec<SimQuery>>, Failure> {
    let p = bundles.with_file_name("queries.json");
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
}

struct Run {
    command: &'static str,
    config_hash: String,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let p = self.out.join(name);
        fs::write(&p, contents).map_err(io(&p))
    }

    fn json(&self, name: &str, v: &Value) -> Result<(), Failure> {
        self.write(name, &(serde_json::to_string_pretty(v).expect("json value") + "\n"))
    }

    fn handbook(&self, name: &str, h: &Handbook) -> Result<(), Failure> {
        handbook::save(h, &self.out.join(name)).map_err(Failure::data)
    }

    fn report(&self, input: Option<u64>, output: Option<u64>, body: Value) -> Result<(), Failure> {
        self.json(
            "report.json",
            &json!({
                "command": self.command,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "input_handbook_version": input,
                "output_handbook_version": output,
                "report": body,
            }),
        )
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

// ── Commands ────────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    if let Command::Simulate { queries: Some(n) } = &cli.command {
        cfg.data.train_queries = *n;
    }
    let world = load_world(c, &mut cfg)?;
    let wb = Workbench::with_world(cfg, world);
    fs::create_dir_all(&c.out).map_err(io(&c.out))?;
    let command = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Learn { .. } => "learn",
        Command::Refine { .. } => "refine",
        Command::Select => "select",
        Command::Route { .. } => "route",
        Command::Eval { .. } => "eval",
    };
    let run = Run {
        command,
        config_hash: wb.config.hash(),
        seed: wb.config.seed,
        out: c.out.clone(),
    };
    let policy = wb.policy();

    match cli.command {
        Command::Simulate { .. } => {
            let initial = wb.initial_handbook();
            let bundles = wb.simulate(&policy)?;
            save_bundles(&c.out, &bundles)?;
            wb.world.save(&c.out.join("world.json"))?;
            run.write("queries.json", &(serde_json::to_string_pretty(&wb.train).expect("queries") + "\n"))?;
            run.handbook("handbook.json", &initial)?;
            let trajectories: usize = bundles.iter().map(|b| b.trajectories.len()).sum();
            run.report(
                Some(initial.version),
                Some(initial.version),
                json!({ "queries": bundles.len(), "trajectories": trajectories }),
            )
        }
        Command::Learn { bundles } => {
            let mut wb = wb;
            if let Some(qs) = bundle_queries(&bundles)? {
                wb.train = qs;
            }
            let input = input_handbook(c, &wb)?;
            let data = load_bundles(&bundles)?;
            let (h, report) = wb.learn(&input, &data)?;
            run.handbook("handbook.json", &h)?;
            run.report(Some(input.version), Some(h.version), to_value(&report))
        }
        Command::Refine { bundles } => {
            let input = input_handbook(c, &wb)?;
            let data = load_bundles(&bundles)?;
            let (h, report) = wb.refine(&input, &data)?;
            run.handbook("handbook.json", &h)?;
            run.report(Some(input.version), Some(h.version), to_value(&report))
        }
        Command::Select => {
            let input = input_handbook(c, &wb)?;
            let mut sweep = Vec::new();
            for &lambda in &wb.config.select.lambdas {
                let (h, report) = wb.select(&input, &policy, lambda)?;
                run.handbook(&format!("handbook_lambda_{lambda}.json"), &h)?;
                run.json(&format!("select_lambda_{lambda}.json"), &to_value(&report))?;
                run.write(&format!("select_lambda_{lambda}.csv"), &report.to_csv())?;
                let winner = report.points.iter().find(|p| p.descriptor == report.winner).expect("winner is a point");
                sweep.push(json!({
                    "lambda": lambda,
                    "winner": report.winner,
                    "winner_cost": winner.mean_cost,
                    "winner_reward": winner.mean_reward,
                    "output_handbook_version": h.version,
                }));
            }
            run.report(Some(input.version), Some(input.version + 1), json!({ "sweep": sweep }))
        }
        Command::Route { split, strategy } => {
            let input = input_handbook(c, &wb)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Validation => Split::Validation,
                SplitArg::Test => Split::Test,
            };
            let selection = match strategy {
                Strategy::Handbook => Selection::SkillGrounded,
                Strategy::Random => Selection::UniformRandom { seed: wb.config.seed },
                Strategy::BestOverall => Selection::Fixed { agent: wb.world.best_overall_agent() },
            };
            let queries: Vec<Query> = wb.queries(split).iter().map(|q| q.query.clone()).collect();
            if c.dry_run {
                let router = Router::new(&policy, wb.config.router.clone()).with_selection(selection);
                let planned = dry_run(&queries, &input, &router)?;
                let lines: String = planned.iter().map(|d| to_json_line(d) + "\n").collect();
                run.write("decisions.jsonl", &lines)?;
                return run.report(
                    Some(input.version),
                    None,
                    json!({ "dry_run": true, "queries": queries.len(), "decisions": planned.len() }),
                );
            }
            let trajectories = match &wb.config.gateway {
                Some(g) => {
                    let env = GatewayEnvironment::new(g.endpoints.clone(), Arc::new(HttpTransport::default()), Some(g.penalty_cost))
                        .map_err(Failure::config)?;
                    let router = Router::new(&policy, wb.config.router.clone()).with_selection(selection);
                    run_episodes(&queries, &input, &env, &router, wb.config.seed)?
                }
                None => wb.route(&input, &policy, selection, split)?,
            };
            let p = c.out.join("trajectories.jsonl");
            save_jsonl(&p, &trajectories).map_err(io(&p))?;
            let report = evaluate(command, &trajectories, &wb.config.eval.lambdas)?;
            run.report(Some(input.version), None, json!({ "dry_run": false, "metrics": to_value(&report) }))
        }
        Command::Eval { trajectories } => {
            let mut reports = Vec::new();
            let mut versions = Vec::new();
            for arg in &trajectories {
                let (label, path) = match arg.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(arg);
                        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        (stem, p)
                    }
                };
                let ts = load_jsonl(&path)?;
                versions.extend(ts.iter().map(|t| t.handbook_version));
                reports.push(evaluate(&label, &ts, &wb.config.eval.lambdas)?);
            }
            run.write("pareto.csv", &pareto_csv(&reports))?;
            versions.sort_unstable();
            versions.dedup();
            let input = if versions.len() == 1 { Some(versions[0]) } else { None };
            run.report(input, None, json!({ "handbook_versions": versions, "methods": to_value(&reports) }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            eprintln!("{}", json!({ "error": f.kind, "message": f.message, "exit_code": f.code }));
            ExitCode::from(f.code)
        }
    }
}
