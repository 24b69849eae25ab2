use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LatentWorld, RewardModel, SimError, SimQuery};
use crate::handbook::ModeId;
use crate::text::derive_seed;
use crate::trajectory::{
    Environment, EnvironmentFactory, Execution, ExecutionError, ExecutionErrorKind,
    InteractionState, Query, Step,
};

/// Environment factory over a fixed query table.
pub struct SimEnvironment<'w> {
    pub world: &'w LatentWorld,
    queries: BTreeMap<String, SimQuery>,
    tag: String,
}

impl<'w> SimEnvironment<'w> {
    pub fn new(world: &'w LatentWorld, queries: &[SimQuery]) -> Self {
        Self {
            world,
            queries: queries
                .iter()
                .map(|q| (q.query.id.clone(), q.clone()))
                .collect(),
            tag: format!("simulator:{}", world.seed),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn sim_query(&self, id: &str) -> Option<&SimQuery> {
        self.queries.get(id)
    }

    pub fn episode_for(&self, q: &SimQuery, seed: u64) -> SimEpisode<'w> {
        SimEpisode {
            world: self.world,
            query: q.clone(),
            seed: derive_seed(&["episode", &seed.to_string(), &q.query.id]),
            visits: BTreeMap::new(),
        }
    }
}

impl EnvironmentFactory for SimEnvironment<'_> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn episode(&self, query: &Query, seed: u64) -> Result<Box<dyn Environment + '_>, ExecutionError> {
        let q = self.queries.get(&query.id).ok_or_else(|| ExecutionError {
            kind: ExecutionErrorKind::Other,
            message: format!("query `{}` is not in the simulator table", query.id),
            penalty_cost: 0.0,
        })?;
        Ok(Box::new(self.episode_for(q, seed)))
    }
}

/// One episode's view of the world. Each (mode, visit index) pair draws from
/// its own stream, so the outcome of a step does not depend on what other
/// modes did before it or on which agent is chosen.
pub struct SimEpisode<'w> {
    world: &'w LatentWorld,
    query: SimQuery,
    seed: u64,
    visits: BTreeMap<ModeId, usize>,
}

impl SimEpisode<'_> {
    /// Executes without the `Environment` error wrapping.
    pub fn step(&mut self, agent: &str, mode: &str) -> Result<Execution, SimError> {
        let a = self.world.agent(agent)?;
        if !self.world.modes.iter().any(|m| m == mode) {
            return Err(SimError::UnknownMode(mode.to_string()));
        }
        let visit = self.visits.entry(mode.to_string()).or_insert(0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            "step",
            &self.seed.to_string(),
            mode,
            &visit.to_string(),
        ]));
        *visit += 1;

        let latent = self.query.latent.get(mode).cloned().unwrap_or_default();
        let p = self.world.step_probability(a, mode, &latent);
        let u: f64 = rng.random();
        let success = u < p;
        let noise = self.world.spec.cost_noise;
        let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
        let cost = (a.cost[mode] + jitter).max(0.0);

        let mut cues: Vec<&str> = Vec::new();
        for lid in &latent {
            let vocab = &self.world.latent(lid).expect("latent exists").vocabulary;
            if success {
                cues.extend(vocab.iter().map(String::as_str));
            } else {
                let visible: Vec<&str> = self.query.query.text.split(' ').collect();
                cues.extend(vocab.iter().map(String::as_str).filter(|v| visible.contains(v)));
            }
        }
        Ok(Execution {
            trace: format!("{agent} {mode} trace {}", cues.join(" ")),
            observation: if success { "status ok".into() } else { "status failed".into() },
            success: Some(success),
            cost,
        })
    }
}

impl Environment for SimEpisode<'_> {
    fn execute(
        &mut self,
        agent: &str,
        mode: &str,
        _state: &InteractionState,
    ) -> Result<Execution, ExecutionError> {
        self.step(agent, mode).map_err(|e| ExecutionError {
            kind: match e {
                SimError::UnknownAgent(_) => ExecutionErrorKind::UnknownAgent,
                SimError::UnknownMode(_) => ExecutionErrorKind::UnknownMode,
                _ => ExecutionErrorKind::Other,
            },
            message: e.to_string(),
            penalty_cost: 0.0,
        })
    }

    fn judge(&mut self, _query: &Query, steps: &[Step]) -> f64 {
        judge(self.world.spec.reward_model, &self.query.required_modes, steps)
    }
}

/// Binary: 1 iff every required mode was executed and all of its steps
/// succeeded. Partial credit: the fraction of required modes that satisfy
/// the same condition.
pub fn judge(model: RewardModel, required: &[ModeId], steps: &[Step]) -> f64 {
    if required.is_empty() {
        return 1.0;
    }
    let satisfied = required
        .iter()
        .filter(|m| {
            let mut of_mode = steps.iter().filter(|s| &s.mode == *m).peekable();
            of_mode.peek().is_some() && of_mode.all(|s| s.success == Some(true))
        })
        .count();
    match model {
        RewardModel::Binary => {
            if satisfied == required.len() {
                1.0
            } else {
                0.0
            }
        }
        RewardModel::PartialCredit => satisfied as f64 / required.len() as f64,
    }
}
