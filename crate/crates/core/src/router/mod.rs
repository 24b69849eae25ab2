//! Skill-grounded agent routing.
//!
//! One routing step composes mode selection, active-skill retrieval and the
//! competence-minus-cost argmax
//!
//! ```text
//!   U(A) = Σ_σ w_σ · α_{A,σ} / (α_{A,σ} + β_{A,σ})  −  λ_c · Ĉ_A(ψ)
//! ```
//!
//! over the agents allowed in the chosen mode. Ties on U go to the lower
//! cost estimate, then to the lexicographically smaller agent id.

mod episode;
mod policy;
mod retrieval;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{AgentId, Handbook, HandbookError, ModeId};
use crate::text::derive_seed;
use crate::trajectory::InteractionState;

pub use episode::{run_episode, run_episodes, ErrorPolicy};
pub use policy::{select_mode, ModePolicy, PolicyError, Rule, RulePolicy, ScriptedPolicy, ANSWER_MODE};
pub use retrieval::{retrieve_active_skills, ActiveSkillSet, Similarity, TokenCosine};

/// Utilities closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Handbook(#[from] HandbookError),
    #[error("mode `{0}` has no allowed agents")]
    NoAgents(ModeId),
    #[error("lambda_c must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("turn {turn} is at or beyond max_turns {max_turns}")]
    HorizonExceeded { turn: usize, max_turns: usize },
    #[error("fixed agent `{agent}` is not allowed in mode `{mode}`")]
    FixedAgentNotAllowed { agent: AgentId, mode: ModeId },
    #[error("no agent assigned for mode `{0}`")]
    Unassigned(ModeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub max_turns: usize,
    pub lambda_c: f64,
    /// Per-mode λ_c overrides.
    pub lambda_c_overrides: BTreeMap<ModeId, f64>,
    pub retrieval_k: usize,
    pub retrieval_threshold: f64,
    pub terminal_mode: ModeId,
    pub on_error: ErrorPolicy,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            max_turns: 4,
            lambda_c: 0.5,
            lambda_c_overrides: BTreeMap::new(),
            retrieval_k: 3,
            retrieval_threshold: 0.05,
            terminal_mode: ANSWER_MODE.to_string(),
            on_error: ErrorPolicy::Continue,
        }
    }
}

impl RouterConfig {
    pub fn lambda_for(&self, mode: &str) -> f64 {
        self.lambda_c_overrides
            .get(mode)
            .copied()
            .unwrap_or(self.lambda_c)
    }
}

/// How the agent is picked once utilities are known. Only `SkillGrounded`
/// is the handbook router; the others are baselines for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    SkillGrounded,
    UniformRandom { seed: u64 },
    Fixed { agent: AgentId },
    /// One preassigned agent per mode; used when collecting training bundles.
    Assigned { by_mode: BTreeMap<ModeId, AgentId> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentScores {
    pub utilities: BTreeMap<AgentId, f64>,
    pub costs: BTreeMap<AgentId, f64>,
    /// Agents scored from the prior because they have no profile.
    pub unprofiled: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub mode: ModeId,
    pub active_skills: ActiveSkillSet,
    pub utilities: BTreeMap<AgentId, f64>,
    pub chosen: AgentId,
    pub tie_break: Option<String>,
    pub unprofiled: Vec<AgentId>,
    pub lambda_c: f64,
    pub handbook_version: u64,
}

/// U(A) for every agent allowed in `mode`.
pub fn score_agents(
    active: &ActiveSkillSet,
    mode: &str,
    handbook: &Handbook,
    lambda_c: f64,
) -> Result<AgentScores, RouterError> {
    if !(lambda_c.is_finite() && lambda_c >= 0.0) {
        return Err(RouterError::BadLambda(lambda_c));
    }
    let meta = handbook
        .mode(mode)
        .ok_or_else(|| HandbookError::UnknownMode(mode.to_string()))?;
    if meta.allowed_agents.is_empty() {
        return Err(RouterError::NoAgents(mode.to_string()));
    }
    let mut scores = AgentScores::default();
    for agent in &meta.allowed_agents {
        let (competence, cost) = match handbook.profile(agent, mode) {
            Some(p) => (
                active
                    .entries
                    .iter()
                    .map(|(sid, w)| w * p.counter(sid).mean())
                    .sum::<f64>(),
                p.cost.mean,
            ),
            None => {
                scores.unprofiled.push(agent.clone());
                (active.entries.values().map(|w| w * 0.5).sum::<f64>(), 0.0)
            }
        };
        scores
            .utilities
            .insert(agent.clone(), competence - lambda_c * cost);
        scores.costs.insert(agent.clone(), cost);
    }
    Ok(scores)
}

/// Argmax with the tie rule: lowest cost, then smallest id.
pub fn pick_best(scores: &AgentScores) -> (AgentId, Option<String>) {
    let best = scores
        .utilities
        .values()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<(&AgentId, f64)> = scores
        .utilities
        .iter()
        .filter(|(_, u)| best - **u <= TIE_EPSILON)
        .map(|(a, _)| (a, scores.costs[a]))
        .collect();
    tied.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let chosen = tied[0].0.clone();
    let note = (tied.len() > 1).then(|| {
        let names: Vec<&str> = tied.iter().map(|(a, _)| a.as_str()).collect();
        let by = if tied[0].1 < tied[1].1 { "lowest cost" } else { "agent id" };
        format!("tie on utility among [{}]; chose `{chosen}` by {by}", names.join(", "))
    });
    (chosen, note)
}

/// Everything a routing step needs besides the state and the handbook.
pub struct Router<'a> {
    pub policy: &'a dyn ModePolicy,
    pub similarity: &'a dyn Similarity,
    pub config: RouterConfig,
    pub selection: Selection,
}

impl<'a> Router<'a> {
    pub fn new(policy: &'a dyn ModePolicy, config: RouterConfig) -> Self {
        Self {
            policy,
            similarity: &TokenCosine,
            config,
            selection: Selection::SkillGrounded,
        }
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn route_step(
        &self,
        state: &InteractionState,
        handbook: &Handbook,
    ) -> Result<RoutingDecision, RouterError> {
        let cfg = &self.config;
        if state.turn >= cfg.max_turns {
            return Err(RouterError::HorizonExceeded {
                turn: state.turn,
                max_turns: cfg.max_turns,
            });
        }
        let mode = select_mode(state, handbook, self.policy, cfg.max_turns, &cfg.terminal_mode)?;
        let active = retrieve_active_skills(
            state,
            &mode,
            handbook,
            cfg.retrieval_k,
            cfg.retrieval_threshold,
            self.similarity,
        )?;
        let lambda_c = cfg.lambda_for(&mode);
        let scores = score_agents(&active, &mode, handbook, lambda_c)?;

        let (chosen, tie_break, utilities) = match &self.selection {
            Selection::SkillGrounded => {
                let (c, t) = pick_best(&scores);
                (c, t, scores.utilities)
            }
            Selection::UniformRandom { seed } => {
                let agents: Vec<&AgentId> = scores.utilities.keys().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    "uniform-random",
                    &seed.to_string(),
                    &state.query.id,
                    &state.turn.to_string(),
                ]));
                let c = agents[rng.random_range(0..agents.len())].clone();
                (c.clone(), Some("baseline: uniform random".to_string()), indicator(&scores, &c))
            }
            Selection::Fixed { agent } => {
                if !scores.utilities.contains_key(agent) {
                    return Err(RouterError::FixedAgentNotAllowed {
                        agent: agent.clone(),
                        mode,
                    });
                }
                (
                    agent.clone(),
                    Some("baseline: fixed agent".to_string()),
                    indicator(&scores, agent),
                )
            }
            Selection::Assigned { by_mode } => {
                let agent = by_mode
                    .get(&mode)
                    .ok_or_else(|| RouterError::Unassigned(mode.clone()))?;
                if !scores.utilities.contains_key(agent) {
                    return Err(RouterError::FixedAgentNotAllowed {
                        agent: agent.clone(),
                        mode,
                    });
                }
                (
                    agent.clone(),
                    Some("assigned agent".to_string()),
                    indicator(&scores, agent),
                )
            }
        };

        Ok(RoutingDecision {
            mode,
            active_skills: active,
            utilities,
            chosen,
            tie_break,
            unprofiled: scores.unprofiled,
            lambda_c,
            handbook_version: handbook.version,
        })
    }
}

/// Baselines record a 0/1 utility so the chosen agent is still the argmax.
fn indicator(scores: &AgentScores, chosen: &str) -> BTreeMap<AgentId, f64> {
    scores
        .utilities
        .keys()
        .map(|a| (a.clone(), if a == chosen { 1.0 } else { 0.0 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handbook::{AgentProfile, BetaCounter, CostStats, ModeMetadata, Skill};
    use crate::trajectory::Query;

    fn two_agent(m1: (f64, f64), c1: f64, m2: (f64, f64), c2: f64) -> Handbook {
        let mut h = Handbook {
            version: 7,
            modes: vec![ModeMetadata {
                mode: "answer".into(),
                insights: vec![],
                allowed_agents: vec!["A1".into(), "A2".into()],
            }],
            ..Default::default()
        };
        h.insert_skill(Skill {
            id: "s".into(),
            description: String::new(),
            indicators: vec!["s".into()],
            parent: None,
            mode: "answer".into(),
        });
        for (id, (a, b), c) in [("A1", m1, c1), ("A2", m2, c2)] {
            let mut p = AgentProfile::new(id, "answer");
            p.counters.insert("s".into(), BetaCounter { alpha: a, beta: b });
            p.cost = CostStats { mean: c, count: 5 };
            h.profiles.push(p);
        }
        h
    }

    fn one_skill() -> ActiveSkillSet {
        ActiveSkillSet {
            entries: [("s".to_string(), 1.0)].into(),
        }
    }

    #[test]
    fn worked_utilities() {
        // means 0.8 and 0.6
        let h = two_agent((8.0, 2.0), 0.5, (6.0, 4.0), 0.1);
        let s = score_agents(&one_skill(), "answer", &h, 1.0).unwrap();
        assert!((s.utilities["A1"] - 0.3).abs() < 1e-12);
        assert!((s.utilities["A2"] - 0.5).abs() < 1e-12);
        assert_eq!(pick_best(&s).0, "A2");
        let s = score_agents(&one_skill(), "answer", &h, 0.0).unwrap();
        assert!((s.utilities["A1"] - 0.8).abs() < 1e-12);
        assert!((s.utilities["A2"] - 0.6).abs() < 1e-12);
        assert_eq!(pick_best(&s).0, "A1");
    }

    #[test]
    fn tie_goes_to_cheaper_then_id() {
        // 0.8 - 0.5*0.4 = 0.6 and 0.7 - 0.5*0.2 = 0.6
        let h = two_agent((8.0, 2.0), 0.4, (7.0, 3.0), 0.2);
        let s = score_agents(&one_skill(), "answer", &h, 0.5).unwrap();
        let (c, note) = pick_best(&s);
        assert_eq!(c, "A2");
        assert!(note.unwrap().contains("lowest cost"));

        let h = two_agent((8.0, 2.0), 0.3, (8.0, 2.0), 0.3);
        let s = score_agents(&one_skill(), "answer", &h, 0.5).unwrap();
        let (c, note) = pick_best(&s);
        assert_eq!(c, "A1");
        assert!(note.unwrap().contains("agent id"));
    }

    #[test]
    fn unprofiled_agents_use_prior_and_are_flagged() {
        let mut h = two_agent((8.0, 2.0), 0.5, (6.0, 4.0), 0.1);
        h.modes[0].allowed_agents.push("A3".into());
        let s = score_agents(&one_skill(), "answer", &h, 1.0).unwrap();
        assert_eq!(s.utilities["A3"], 0.5);
        assert_eq!(s.unprofiled, vec!["A3".to_string()]);
    }

    #[test]
    fn empty_agent_set_errors() {
        let mut h = two_agent((1.0, 1.0), 0.0, (1.0, 1.0), 0.0);
        h.modes[0].allowed_agents.clear();
        assert!(matches!(
            score_agents(&one_skill(), "answer", &h, 0.5),
            Err(RouterError::NoAgents(_))
        ));
        assert!(matches!(
            score_agents(&one_skill(), "answer", &h, -1.0),
            Err(RouterError::BadLambda(_))
        ));
    }

    #[test]
    fn route_step_records_full_audit() {
        let h = two_agent((8.0, 2.0), 0.5, (6.0, 4.0), 0.1);
        let policy = RulePolicy::needs_table("r", &[]);
        let router = Router::new(&policy, RouterConfig { lambda_c: 1.0, ..Default::default() });
        let state = InteractionState::new(Query {
            id: "q".into(),
            text: "s".into(),
            tags: vec![],
        });
        let d = router.route_step(&state, &h).unwrap();
        assert_eq!(d.mode, "answer");
        assert_eq!(d.chosen, "A2");
        assert_eq!(d.utilities.len(), 2);
        assert_eq!(d.handbook_version, 7);
        assert_eq!(d.lambda_c, 1.0);
    }

    #[test]
    fn horizon_is_enforced() {
        let h = two_agent((1.0, 1.0), 0.0, (1.0, 1.0), 0.0);
        let policy = RulePolicy::needs_table("r", &[]);
        let router = Router::new(&policy, RouterConfig { max_turns: 0, ..Default::default() });
        let state = InteractionState::new(Query {
            id: "q".into(),
            text: String::new(),
            tags: vec![],
        });
        assert!(matches!(
            router.route_step(&state, &h),
            Err(RouterError::HorizonExceeded { .. })
        ));
    }
}
