//! The simulate → learn → refine → select → route → eval chain over one
//! simulated world, as used by the command-line driver and the acceptance
//! suite.
//!
//! A [`Workbench`] is a pure function of the [`Config`]: the world, the
//! train/validation/test query sets and every episode stream derive from
//! `config.seed`, so two workbenches built from equal configs produce equal
//! artifacts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError, ProposerKind};
use crate::handbook::{AgentId, Handbook};
use crate::learner::{learn, BaselineProposer, LearnError, LearnReport, OracleProposer, SkillProposer, TrajectoryBundle};
use crate::metrics::{evaluate, paired_bootstrap, per_query_objective, BootstrapInterval, EvalReport, MetricsError};
use crate::refiner::{refine, AutoApprove, RefineError, RefineReport};
use crate::router::{run_episodes, Router, RouterError, RoutingDecision, RulePolicy, Selection};
use crate::selector::{select, SelectError, SelectionReport};
use crate::simulator::{generate_world, oracle_route, simulate_bundles, BundleProtocol, LatentWorld, SimEnvironment, SimError, SimQuery};
use crate::text::derive_seed;
use crate::trajectory::{HistoryEntry, InteractionState, Query, Trajectory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] SimError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which query set a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub struct Workbench {
    pub config: Config,
    pub world: LatentWorld,
    pub train: Vec<SimQuery>,
    pub validation: Vec<SimQuery>,
    pub test: Vec<SimQuery>,
}

impl Workbench {
    pub fn new(config: Config) -> Result<Self, PipelineError> {
        config.validate()?;
        let world = generate_world(&config.world, config.seed)?;
        Ok(Self::with_world(config, world))
    }

    /// Uses a previously generated world instead of generating one.
    pub fn with_world(config: Config, world: LatentWorld) -> Self {
        let d = &config.data;
        let train = world.sample_queries(d.train_queries, config.seed, "train");
        let validation = world.sample_queries(d.validation_queries, config.seed, "val");
        let test = world.sample_queries(d.test_queries, config.seed, "test");
        Self {
            config,
            world,
            train,
            validation,
            test,
        }
    }

    pub fn queries(&self, split: Split) -> &[SimQuery] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// The configured rule table, restricted to the world's modes.
    pub fn policy(&self) -> RulePolicy {
        self.policy_with(&self.config.policy.name, &self.config.policy.order)
    }

    pub fn policy_with(&self, name: &str, order: &[String]) -> RulePolicy {
        let order: Vec<&str> = order
            .iter()
            .filter(|m| self.world.modes.contains(m))
            .map(String::as_str)
            .collect();
        RulePolicy::needs_table(name, &order)
    }

    pub fn initial_handbook(&self) -> Handbook {
        self.world.initial_handbook()
    }

    fn stream(&self, label: &str) -> u64 {
        derive_seed(&[label, &self.config.seed.to_string()])
    }

    /// Agent-variation bundles over the training queries, collected with the
    /// skill-free initial handbook.
    pub fn simulate(&self, policy: &RulePolicy) -> Result<Vec<TrajectoryBundle>, PipelineError> {
        let protocol = BundleProtocol {
            designated_modes: self.config.data.designated_modes.clone(),
            seed: self.stream("bundles"),
        };
        Ok(simulate_bundles(
            &self.world,
            &self.train,
            &self.initial_handbook(),
            policy,
            &self.config.router,
            &protocol,
        )?)
    }

    pub fn proposer(&self) -> Box<dyn SkillProposer + '_> {
        match self.config.proposer {
            ProposerKind::Oracle => Box::new(OracleProposer::new(&self.world, &self.train)),
            ProposerKind::Baseline => Box::new(BaselineProposer::new()),
        }
    }

    pub fn learn(&self, handbook: &Handbook, bundles: &[TrajectoryBundle]) -> Result<(Handbook, LearnReport), PipelineError> {
        Ok(learn(handbook, bundles, self.proposer().as_ref(), &self.config.learner)?)
    }

    pub fn refine(&self, handbook: &Handbook, bundles: &[TrajectoryBundle]) -> Result<(Handbook, RefineReport), PipelineError> {
        Ok(refine(
            handbook,
            bundles,
            &self.config.learner.judge(),
            &AutoApprove,
            &self.config.refiner,
        )?)
    }

    /// Handbook selection on the validation queries.
    pub fn select(&self, handbook: &Handbook, policy: &RulePolicy, lambda: f64) -> Result<(Handbook, SelectionReport), PipelineError> {
        let env = SimEnvironment::new(&self.world, &self.validation).with_tag(format!("simulator:{}", policy.name));
        let router = Router::new(policy, self.config.router.clone());
        let queries: Vec<Query> = self.validation.iter().map(|q| q.query.clone()).collect();
        Ok(select(handbook, &queries, &env, &router, lambda, self.stream("select"))?)
    }

    /// One episode per query of `split`. Every selection strategy sees the
    /// same episode streams.
    pub fn route(
        &self,
        handbook: &Handbook,
        policy: &RulePolicy,
        selection: Selection,
        split: Split,
    ) -> Result<Vec<Trajectory>, PipelineError> {
        let qs = self.queries(split);
        let env = SimEnvironment::new(&self.world, qs);
        let router = Router::new(policy, self.config.router.clone()).with_selection(selection);
        let queries: Vec<Query> = qs.iter().map(|q| q.query.clone()).collect();
        Ok(run_episodes(&queries, handbook, &env, &router, self.stream("route"))?)
    }

    /// Mean expected J of the true-parameter router over `split`.
    pub fn oracle_objective(&self, split: Split, lambda: f64) -> f64 {
        let qs = self.queries(split);
        let total = qs
            .iter()
            .map(|q| oracle_route(&self.world, q, self.config.router.lambda_c).expected_objective(lambda))
            .fold(0.0, |a, j| a + j);
        total / qs.len().max(1) as f64
    }

    /// simulate → learn → refine → select at `lambda`.
    pub fn build_handbook(&self, policy: &RulePolicy, lambda: f64) -> Result<BuiltHandbook, PipelineError> {
        let bundles = self.simulate(policy)?;
        let (learned, learn_report) = self.learn(&self.initial_handbook(), &bundles)?;
        let (refined, refine_report) = self.refine(&learned, &bundles)?;
        let (selected, select_report) = self.select(&refined, policy, lambda)?;
        Ok(BuiltHandbook {
            learned,
            refined,
            selected,
            learn_report,
            refine_report,
            select_report,
        })
    }
}

pub struct BuiltHandbook {
    pub learned: Handbook,
    pub refined: Handbook,
    pub selected: Handbook,
    pub learn_report: LearnReport,
    pub refine_report: RefineReport,
    pub select_report: SelectionReport,
}

// ── Lift experiment ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub lambda: f64,
    pub oracle_objective: f64,
    pub learned: EvalReport,
    pub random: EvalReport,
    pub best_overall: EvalReport,
    pub best_overall_agent: AgentId,
    pub vs_random: BootstrapInterval,
    pub vs_best_overall: BootstrapInterval,
}

impl LiftReport {
    pub fn learned_objective(&self) -> f64 {
        self.learned.mean_reward - self.lambda * self.learned.mean_cost
    }

    pub fn random_objective(&self) -> f64 {
        self.random.mean_reward - self.lambda * self.random.mean_cost
    }

    pub fn oracle_share(&self) -> f64 {
        self.learned_objective() / self.oracle_objective
    }
}

/// Routes the test split with `handbook` and with the random and
/// always-best-overall baselines, and compares per-query J at `lambda`.
pub fn lift(wb: &Workbench, handbook: &Handbook, policy: &RulePolicy, lambda: f64) -> Result<LiftReport, PipelineError> {
    let lambdas = [lambda];
    let best = wb.world.best_overall_agent();
    let learned = wb.route(handbook, policy, Selection::SkillGrounded, Split::Test)?;
    let random = wb.route(handbook, policy, Selection::UniformRandom { seed: wb.stream("random") }, Split::Test)?;
    let fixed = wb.route(handbook, policy, Selection::Fixed { agent: best.clone() }, Split::Test)?;
    let j = |ts: &[Trajectory]| per_query_objective(ts, lambda);
    let e = &wb.config.eval;
    let vs_random = paired_bootstrap(&j(&learned), &j(&random), e.bootstrap_resamples, e.confidence, wb.stream("bootstrap-random"))?;
    let vs_best_overall =
        paired_bootstrap(&j(&learned), &j(&fixed), e.bootstrap_resamples, e.confidence, wb.stream("bootstrap-best"))?;
    Ok(LiftReport {
        lambda,
        oracle_objective: wb.oracle_objective(Split::Test, lambda),
        learned: evaluate("learned", &learned, &lambdas)?,
        random: evaluate("random", &random, &lambdas)?,
        best_overall: evaluate("best-overall", &fixed, &lambdas)?,
        best_overall_agent: best,
        vs_random,
        vs_best_overall,
    })
}

// ── Dry run ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedDecision {
    pub query_id: String,
    pub turn: usize,
    pub decision: RoutingDecision,
}

/// Routing decisions without executing anything: each chosen call is
/// assumed to return an empty trace, and routing continues until the
/// terminal mode or the turn budget.
pub fn dry_run(queries: &[Query], handbook: &Handbook, router: &Router<'_>) -> Result<Vec<PlannedDecision>, RouterError> {
    let mut out = Vec::new();
    for q in queries {
        let mut state = InteractionState::new(q.clone());
        while state.turn < router.config.max_turns {
            let d = router.route_step(&state, handbook)?;
            let terminal = d.mode == router.config.terminal_mode;
            state.push(HistoryEntry {
                mode: d.mode.clone(),
                agent: d.chosen.clone(),
                trace_digest: String::new(),
                observation_digest: String::new(),
            });
            out.push(PlannedDecision {
                query_id: q.id.clone(),
                turn: state.turn - 1,
                decision: d,
            });
            if terminal {
                break;
            }
        }
    }
    Ok(out)
}
