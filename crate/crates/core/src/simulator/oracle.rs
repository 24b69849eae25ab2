use serde::{Deserialize, Serialize};

use super::{LatentWorld, RewardModel, SimQuery};
use crate::handbook::{AgentId, ModeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStep {
    pub mode: ModeId,
    pub agent: AgentId,
    pub success_probability: f64,
    pub cost: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRoute {
    pub steps: Vec<OracleStep>,
    pub expected_reward: f64,
    pub expected_cost: f64,
}

impl OracleRoute {
    pub fn expected_objective(&self, lambda: f64) -> f64 {
        self.expected_reward - lambda * self.expected_cost
    }
}

/// Per required mode, the agent maximizing `p̄ − λ_c·c*` under the true
/// parameters (ties: cheaper, then smaller id).
pub fn oracle_route(world: &LatentWorld, query: &SimQuery, lambda_c: f64) -> OracleRoute {
    let mut steps = Vec::new();
    for mode in &query.required_modes {
        let latent = query.latent.get(mode).cloned().unwrap_or_default();
        let best = world
            .agents
            .iter()
            .map(|a| {
                let p = world.step_probability(a, mode, &latent);
                let c = a.cost[mode];
                OracleStep {
                    mode: mode.clone(),
                    agent: a.id.clone(),
                    success_probability: p,
                    cost: c,
                    utility: p - lambda_c * c,
                }
            })
            .reduce(|best, cand| {
                let better = cand.utility > best.utility
                    || (cand.utility == best.utility
                        && (cand.cost < best.cost || (cand.cost == best.cost && cand.agent < best.agent)));
                if better {
                    cand
                } else {
                    best
                }
            })
            .expect("world has agents");
        steps.push(best);
    }
    let expected_reward = match world.spec.reward_model {
        RewardModel::Binary => steps.iter().map(|s| s.success_probability).product(),
        RewardModel::PartialCredit => {
            steps.iter().map(|s| s.success_probability).sum::<f64>() / steps.len().max(1) as f64
        }
    };
    let expected_cost = steps.iter().map(|s| s.cost).sum();
    OracleRoute {
        steps,
        expected_reward,
        expected_cost,
    }
}
