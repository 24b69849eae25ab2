//! Run configuration.
//!
//! Human-edited config is TOML; every field has a default, so an empty file
//! is a complete config. Every report carries [`Config::hash`], the SHA-256
//! of the config's canonical JSON form.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 7 | master seed; world, query sets and episodes derive from it |
//! | `world.*` | see [`WorldSpec`] | simulated agent pool (6 agents, 3 modes, 4 latent skills per mode) |
//! | `data.train_queries` | 300 | queries in the exploratory training set |
//! | `data.validation_queries` | 100 | queries used by handbook selection |
//! | `data.test_queries` | 200 | held-out queries for routing and evaluation |
//! | `data.designated_modes` | `[]` | modes whose agent is varied per bundle; empty means all |
//! | `policy.name` | `needs-table` | label of the rule-table mode policy |
//! | `policy.order` | `["search", "code", "reason", "math", "browse", "plan", "verify"]` | order in which `needs:<mode>` tags are served |
//! | `router.max_turns` | 4 | turn budget per episode |
//! | `router.lambda_c` | 0.5 | per-step cost weight in the routing utility |
//! | `router.lambda_c_overrides` | `{}` | per-mode `lambda_c` |
//! | `router.retrieval_k` | 3 | skills retrieved per step |
//! | `router.retrieval_threshold` | 0.05 | minimum similarity for retrieval |
//! | `router.terminal_mode` | `answer` | mode that ends an episode |
//! | `router.on_error` | `continue` | `continue` or `terminate` after a failed call |
//! | `learner.success_threshold` | 0.5 | reward that counts as success |
//! | `learner.cluster_jaccard` | 0.5 | diff clustering overlap |
//! | `learner.dedup_jaccard` | 0.6 | proposal dedup overlap |
//! | `learner.attribution` | `trajectory` | `trajectory` or `step` credit for profile counts |
//! | `learner.insights.min_support` | 5 | observations before a pattern is reported |
//! | `learner.insights.failure_rate` | 0.6 | failure share flagged as systematic |
//! | `learner.insights.min_transition_share` | 0.5 | share of successes a transition must reach |
//! | `learner.insights.max_per_mode` | 6 | insight cap per mode |
//! | `proposer` | `oracle` | skill proposer: `oracle` (reads the latent table) or `baseline` |
//! | `refiner.min_queries` | 6 | queries before a split is considered |
//! | `refiner.variance_threshold` | 0.3 | cluster gap that flags a split |
//! | `refiner.significance_alpha` | 0.05 | merge test level |
//! | `refiner.min_observations` | 10 | per-agent observations for a merge |
//! | `select.lambdas` | `[0.5]` | λ values for handbook selection |
//! | `eval.lambdas` | `[0, 0.5, 1]` | λ values reported by evaluation |
//! | `eval.bootstrap_resamples` | 2000 | paired bootstrap resamples |
//! | `eval.confidence` | 0.95 | bootstrap interval level |
//! | `gateway` | absent | HTTP agent endpoints; when present, routing runs against them |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::AgentEndpoint;
use crate::handbook::ModeId;
use crate::learner::LearnerConfig;
use crate::refiner::RefinerConfig;
use crate::router::RouterConfig;
use crate::simulator::WorldSpec;
use crate::text::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerKind {
    Oracle,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub designated_modes: Vec<ModeId>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_queries: 300,
            validation_queries: 100,
            test_queries: 200,
            designated_modes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub name: String,
    pub order: Vec<ModeId>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            name: "needs-table".into(),
            order: ["search", "code", "reason", "math", "browse", "plan", "verify"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0],
            bootstrap_resamples: 2000,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub endpoints: Vec<AgentEndpoint>,
    /// Normalized cost charged for a failed call.
    #[serde(default = "default_penalty")]
    pub penalty_cost: f64,
}

fn default_penalty() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub router: RouterConfig,
    pub learner: LearnerConfig,
    pub proposer: ProposerKind,
    pub refiner: RefinerConfig,
    pub select: SelectConfig,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldSpec::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            router: RouterConfig::default(),
            learner: LearnerConfig::default(),
            proposer: ProposerKind::Oracle,
            refiner: RefinerConfig::default(),
            select: SelectConfig::default(),
            eval: EvalConfig::default(),
            gateway: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.router.max_turns == 0 {
            return bad("router.max_turns must be positive".into());
        }
        let lambdas = self.select.lambdas.iter().chain(&self.eval.lambdas);
        if let Some(l) = lambdas.clone().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda {l} must be finite and non-negative"));
        }
        if !(self.router.lambda_c.is_finite() && self.router.lambda_c >= 0.0) {
            return bad("router.lambda_c must be finite and non-negative".into());
        }
        if self.select.lambdas.is_empty() {
            return bad("select.lambdas must not be empty".into());
        }
        if !(0.0 < self.eval.confidence && self.eval.confidence < 1.0) {
            return bad("eval.confidence must be in (0, 1)".into());
        }
        if let Some(g) = &self.gateway {
            for e in &g.endpoints {
                e.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Canonical JSON: struct fields in declaration order, maps sorted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}
