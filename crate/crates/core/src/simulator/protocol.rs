use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LatentWorld, SimEnvironment, SimQuery};
use crate::handbook::{Handbook, ModeId};
use crate::learner::TrajectoryBundle;
use crate::router::{run_episode, ModePolicy, Router, RouterConfig, RouterError, Selection};
use crate::text::derive_seed;

/// Agent-variation protocol for building a training set: every query is run
/// once per candidate agent at each designated mode, while the other modes
/// keep one per-query background agent. All trajectories of a query share
/// the episode seed, so they differ only through the varied agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleProtocol {
    /// Modes whose agent is varied; empty means every mode.
    pub designated_modes: Vec<ModeId>,
    pub seed: u64,
}

pub fn simulate_bundles(
    world: &LatentWorld,
    queries: &[SimQuery],
    handbook: &Handbook,
    policy: &dyn ModePolicy,
    config: &RouterConfig,
    protocol: &BundleProtocol,
) -> Result<Vec<TrajectoryBundle>, RouterError> {
    let env = SimEnvironment::new(world, queries);
    queries
        .par_iter()
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                "background",
                &protocol.seed.to_string(),
                &q.query.id,
            ]));
            let background: BTreeMap<ModeId, String> = handbook
                .modes
                .iter()
                .filter(|m| !m.allowed_agents.is_empty())
                .map(|m| (m.mode.clone(), m.allowed_agents.choose(&mut rng).unwrap().clone()))
                .collect();

            let mut trajectories = Vec::new();
            for mode in &q.required_modes {
                if !protocol.designated_modes.is_empty() && !protocol.designated_modes.contains(mode) {
                    continue;
                }
                let Some(meta) = handbook.mode(mode) else { continue };
                for agent in &meta.allowed_agents {
                    let mut by_mode = background.clone();
                    by_mode.insert(mode.clone(), agent.clone());
                    let router = Router::new(policy, config.clone())
                        .with_selection(Selection::Assigned { by_mode });
                    let mut ep = env.episode_for(q, protocol.seed);
                    let mut t = run_episode(&q.query, handbook, &mut ep, &router)?;
                    t.id = format!("{}/{mode}={agent}", q.query.id);
                    trajectories.push(t);
                }
            }
            Ok(TrajectoryBundle {
                query: q.query.clone(),
                trajectories,
            })
        })
        .collect()
}
