//! Synthetic agent pool with latent ground truth.
//!
//! A [`LatentWorld`] fixes, for every agent, a true success probability per
//! latent skill and a true per-call cost per mode. Queries mention a few cue
//! tokens from the vocabulary of each latent skill they exercise, and agent
//! traces echo those vocabularies, which gives token-based retrieval and the
//! baseline skill proposer a signal to work with. Everything is a pure
//! function of the world seed and the episode seed.

mod env;
pub mod fixtures;
mod oracle;
mod protocol;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{AgentId, Handbook, ModeId, ModeMetadata};
use crate::router::ANSWER_MODE;
use crate::text::derive_seed;
use crate::trajectory::Query;

pub use env::{judge, SimEnvironment, SimEpisode};
pub use oracle::{oracle_route, OracleRoute, OracleStep};
pub use protocol::{simulate_bundles, BundleProtocol};

const MODE_NAMES: [&str; 7] = ["search", "code", "reason", "math", "browse", "plan", "verify"];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "zo", "vi", "ne", "sha", "qu", "dor", "pel", "bri", "fa", "gu", "xen",
];
const FILLER: [&str; 6] = ["please", "handle", "request", "item", "thanks", "kindly"];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error("unknown mode `{0}`")]
    UnknownMode(ModeId),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    /// One agent ranking holds for every skill.
    None,
    /// Independent per-skill noise; no specialization guarantee.
    Mild,
    /// Every agent is beaten by at least 0.2 on some skill.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessModel {
    /// Average p* over the step's latent skills.
    Mean,
    /// Minimum p* over the step's latent skills.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardModel {
    Binary,
    PartialCredit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Total modes, including the terminal `answer` mode.
    pub modes: usize,
    pub latent_skills_per_mode: usize,
    pub agents: usize,
    pub heterogeneity: Heterogeneity,
    pub vocab_per_skill: usize,
    pub cues_per_query: usize,
    pub query_templates: usize,
    /// Probability that a template requires each non-terminal mode.
    pub mode_probability: f64,
    /// Half-width of the uniform noise added to each call's cost.
    pub cost_noise: f64,
    pub success_model: SuccessModel,
    pub reward_model: RewardModel,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            modes: 3,
            latent_skills_per_mode: 4,
            agents: 6,
            heterogeneity: Heterogeneity::Strict,
            vocab_per_skill: 6,
            cues_per_query: 2,
            query_templates: 24,
            mode_probability: 0.7,
            cost_noise: 0.02,
            success_model: SuccessModel::Mean,
            reward_model: RewardModel::Binary,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Spec(m.to_string()));
        if self.agents == 0 {
            return bad("at least one agent is required");
        }
        if self.modes == 0 || self.modes > MODE_NAMES.len() + 1 {
            return bad("modes must be between 1 and 8");
        }
        if self.latent_skills_per_mode == 0 {
            return bad("latent_skills_per_mode must be positive");
        }
        if self.cues_per_query == 0 || self.cues_per_query > self.vocab_per_skill {
            return bad("cues_per_query must be in 1..=vocab_per_skill");
        }
        if self.query_templates == 0 {
            return bad("query_templates must be positive");
        }
        if !(0.0..=1.0).contains(&self.mode_probability) {
            return bad("mode_probability must be in [0, 1]");
        }
        if !(self.cost_noise >= 0.0 && self.cost_noise.is_finite()) {
            return bad("cost_noise must be non-negative");
        }
        if self.heterogeneity == Heterogeneity::Strict && self.agents < 2 {
            return bad("strict heterogeneity needs at least two agents");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSkill {
    pub id: String,
    pub mode: ModeId,
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAgent {
    pub id: AgentId,
    /// p*_{A,σ} per latent skill.
    pub success: BTreeMap<String, f64>,
    /// c*_A(ψ) per mode, normalized cost units.
    pub cost: BTreeMap<ModeId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub id: String,
    /// Required modes in canonical order; always ends with `answer`.
    pub modes: Vec<ModeId>,
    /// Latent skills exercised per required mode.
    pub latent: BTreeMap<ModeId, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWorld {
    pub seed: u64,
    pub spec: WorldSpec,
    pub modes: Vec<ModeId>,
    pub latent_skills: Vec<LatentSkill>,
    pub agents: Vec<SimAgent>,
    pub templates: Vec<QueryTemplate>,
}

/// A query together with its hidden ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimQuery {
    pub query: Query,
    pub template: String,
    pub required_modes: Vec<ModeId>,
    pub latent: BTreeMap<ModeId, Vec<String>>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let w: String = (0..3).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn mode_names(n: usize) -> Vec<ModeId> {
    let mut out: Vec<ModeId> = MODE_NAMES[..n - 1].iter().map(|s| s.to_string()).collect();
    out.push(ANSWER_MODE.to_string());
    out
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<LatentWorld, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&["world", &seed.to_string()]));
    let modes = mode_names(spec.modes);

    let mut taken = BTreeSet::new();
    let mut latent_skills = Vec::new();
    for mode in &modes {
        for j in 0..spec.latent_skills_per_mode {
            let vocabulary = (0..spec.vocab_per_skill)
                .map(|_| pseudo_word(&mut rng, &mut taken))
                .collect();
            latent_skills.push(LatentSkill {
                id: format!("{mode}_l{j}"),
                mode: mode.clone(),
                vocabulary,
            });
        }
    }

    // Base ability spread evenly; cost grows with base ability.
    let n = spec.agents;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let rank_frac = |i: usize| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let mode_mult: BTreeMap<&ModeId, f64> =
        modes.iter().map(|m| (m, rng.random_range(0.8..1.2))).collect();

    let mut agents: Vec<SimAgent> = (0..n)
        .map(|a| SimAgent {
            id: format!("agent{a}"),
            success: BTreeMap::new(),
            cost: BTreeMap::new(),
        })
        .collect();
    let mut base = vec![0.0; n];
    for (rank, &a) in order.iter().enumerate() {
        let f = rank_frac(rank);
        base[a] = match spec.heterogeneity {
            Heterogeneity::None => 0.3 + 0.6 * f,
            _ => 0.3 + 0.35 * f,
        };
        let tier = 0.1 + 0.8 * f;
        for m in &modes {
            let c = tier * mode_mult[m];
            agents[a].cost.insert(m.clone(), (c * 1e4).round() / 1e4);
        }
    }

    for mode in &modes {
        let skills: Vec<&LatentSkill> = latent_skills.iter().filter(|s| &s.mode == mode).collect();
        let mut specialists: Vec<usize> = (0..n).collect();
        specialists.shuffle(&mut rng);
        for (j, skill) in skills.iter().enumerate() {
            let specialist = specialists[j % n];
            for (a, agent) in agents.iter_mut().enumerate() {
                let p: f64 = match spec.heterogeneity {
                    Heterogeneity::None => base[a] + rng.random_range(-0.01..0.01),
                    Heterogeneity::Mild => base[a] + rng.random_range(-0.25..0.25),
                    Heterogeneity::Strict if a == specialist => rng.random_range(0.88..0.97),
                    Heterogeneity::Strict => (base[a] + rng.random_range(-0.1..0.1)).min(0.68),
                };
                let p = (p.clamp(0.02, 0.98) * 1e4).round() / 1e4;
                agent.success.insert(skill.id.clone(), p);
            }
        }
    }

    let mut templates = Vec::new();
    for t in 0..spec.query_templates {
        let mut req: Vec<ModeId> = modes[..modes.len() - 1]
            .iter()
            .filter(|_| rng.random_bool(spec.mode_probability))
            .cloned()
            .collect();
        req.push(ANSWER_MODE.to_string());
        let latent = req
            .iter()
            .map(|m| {
                let pool: Vec<&LatentSkill> = latent_skills.iter().filter(|s| &s.mode == m).collect();
                (m.clone(), vec![pool.choose(&mut rng).unwrap().id.clone()])
            })
            .collect();
        templates.push(QueryTemplate {
            id: format!("tpl{t}"),
            modes: req,
            latent,
        });
    }

    let world = LatentWorld {
        seed,
        spec: spec.clone(),
        modes,
        latent_skills,
        agents,
        templates,
    };
    if spec.heterogeneity == Heterogeneity::Strict && !world.is_strictly_heterogeneous(0.2) {
        return Err(SimError::Spec(
            "could not satisfy strict heterogeneity with these counts".into(),
        ));
    }
    Ok(world)
}

impl LatentWorld {
    pub fn agent(&self, id: &str) -> Result<&SimAgent, SimError> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| SimError::UnknownAgent(id.to_string()))
    }

    pub fn latent(&self, id: &str) -> Option<&LatentSkill> {
        self.latent_skills.iter().find(|s| s.id == id)
    }

    pub fn mode_latents(&self, mode: &str) -> Vec<&LatentSkill> {
        self.latent_skills.iter().filter(|s| s.mode == mode).collect()
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.iter().map(|a| a.id.clone()).collect()
    }

    /// True if every agent is beaten by at least `margin` on some skill.
    pub fn is_strictly_heterogeneous(&self, margin: f64) -> bool {
        self.agents.iter().all(|a| {
            self.latent_skills.iter().any(|s| {
                self.agents
                    .iter()
                    .any(|b| b.id != a.id && b.success[&s.id] - a.success[&s.id] >= margin - 1e-12)
            })
        })
    }

    /// Agent with the highest mean p* over all latent skills (ties by id).
    pub fn best_overall_agent(&self) -> AgentId {
        let mean = |a: &SimAgent| a.success.values().sum::<f64>() / a.success.len() as f64;
        self.agents
            .iter()
            .max_by(|a, b| mean(a).total_cmp(&mean(b)).then(b.id.cmp(&a.id)))
            .map(|a| a.id.clone())
            .expect("world has agents")
    }

    /// Mean p* over the given latent skills under the world's success model.
    pub fn step_probability(&self, agent: &SimAgent, mode: &str, latent: &[String]) -> f64 {
        let ids: Vec<&String> = if latent.is_empty() {
            self.latent_skills
                .iter()
                .filter(|s| s.mode == mode)
                .map(|s| &s.id)
                .collect()
        } else {
            latent.iter().collect()
        };
        let ps = ids.iter().map(|id| agent.success.get(*id).copied().unwrap_or(0.0));
        match self.spec.success_model {
            SuccessModel::Mean => ps.sum::<f64>() / ids.len().max(1) as f64,
            SuccessModel::Min => ps.fold(1.0, f64::min),
        }
    }

    /// Mode metadata and allowed agents, with no skills or profiles.
    pub fn initial_handbook(&self) -> Handbook {
        Handbook {
            version: 1,
            provenance: format!("v1: initialized from simulated world (seed {})", self.seed),
            modes: self
                .modes
                .iter()
                .map(|m| ModeMetadata {
                    mode: m.clone(),
                    insights: vec![],
                    allowed_agents: self.agent_ids(),
                })
                .collect(),
            edges: self.modes.iter().map(|m| (m.clone(), vec![])).collect(),
            ..Default::default()
        }
    }

    /// `n` queries drawn from the templates. `prefix` namespaces the ids
    /// and the sampling stream, so train and test sets are independent.
    pub fn sample_queries(&self, n: usize, seed: u64, prefix: &str) -> Vec<SimQuery> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&["queries", prefix, &seed.to_string()]));
        (0..n)
            .map(|i| {
                let t = self.templates.choose(&mut rng).unwrap();
                self.instantiate(t, format!("{prefix}-{i:04}"), &mut rng)
            })
            .collect()
    }

    pub fn instantiate(&self, t: &QueryTemplate, id: String, rng: &mut ChaCha8Rng) -> SimQuery {
        let mut words: Vec<String> = vec![FILLER.choose(rng).unwrap().to_string()];
        for m in &t.modes {
            for lid in &t.latent[m] {
                let vocab = &self.latent(lid).expect("template latent exists").vocabulary;
                words.extend(
                    vocab
                        .choose_multiple(rng, self.spec.cues_per_query)
                        .cloned(),
                );
            }
        }
        words.push(FILLER.choose(rng).unwrap().to_string());
        SimQuery {
            query: Query {
                id,
                text: words.join(" "),
                tags: t
                    .modes
                    .iter()
                    .filter(|m| m.as_str() != ANSWER_MODE)
                    .map(|m| format!("needs:{m}"))
                    .collect(),
            },
            template: t.id.clone(),
            required_modes: t.modes.clone(),
            latent: t.latent.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::Parse(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| SimError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
    }
}

/// Reads a world spec from TOML (`.toml`) or JSON (anything else).
pub fn load_spec(path: &Path) -> Result<WorldSpec, SimError> {
    let text = fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
    let spec: WorldSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))?
    };
    spec.validate()?;
    Ok(spec)
}
