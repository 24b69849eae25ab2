use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Router, RouterError, Selection};
use crate::handbook::Handbook;
use crate::trajectory::{
    Environment, EnvironmentFactory, HistoryEntry, InteractionState, Query, Step, Trajectory,
};

/// What to do after an agent call fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    Continue,
    Terminate,
}

fn policy_label(router: &Router<'_>) -> String {
    match &router.selection {
        Selection::SkillGrounded => router.policy.name(),
        Selection::UniformRandom { .. } => format!("{}+random", router.policy.name()),
        Selection::Fixed { agent } => format!("{}+fixed:{agent}", router.policy.name()),
        Selection::Assigned { .. } => format!("{}+assigned", router.policy.name()),
    }
}

/// Runs route → execute → update until the terminal mode has executed or
/// the turn budget is spent.
pub fn run_episode(
    query: &Query,
    handbook: &Handbook,
    env: &mut dyn Environment,
    router: &Router<'_>,
) -> Result<Trajectory, RouterError> {
    let cfg = &router.config;
    let mut state = InteractionState::new(query.clone());
    let mut steps: Vec<Step> = Vec::new();

    while state.turn < cfg.max_turns {
        let d = router.route_step(&state, handbook)?;
        let (trace, observation, success, cost, error) =
            match env.execute(&d.chosen, &d.mode, &state) {
                Ok(x) => (x.trace, x.observation, x.success, x.cost, None),
                Err(e) => (
                    String::new(),
                    format!("error {:?}", e.kind),
                    Some(false),
                    e.penalty_cost,
                    Some(e),
                ),
            };
        let failed = error.is_some();
        state.push(HistoryEntry {
            mode: d.mode.clone(),
            agent: d.chosen.clone(),
            trace_digest: trace.clone(),
            observation_digest: observation.clone(),
        });
        let terminal = d.mode == cfg.terminal_mode;
        steps.push(Step {
            turn: steps.len(),
            mode: d.mode,
            agent: d.chosen,
            active_skills: d.active_skills.entries,
            utilities: d.utilities,
            cost,
            trace_digest: trace,
            observation_digest: observation,
            success,
            error,
            tie_break: d.tie_break,
            unprofiled: d.unprofiled,
            lambda_c: d.lambda_c,
        });
        if terminal || (failed && cfg.on_error == ErrorPolicy::Terminate) {
            break;
        }
    }

    let reward = env.judge(query, &steps).clamp(0.0, 1.0);
    let total_cost = steps.iter().fold(0.0, |acc, s| acc + s.cost);
    Ok(Trajectory {
        id: query.id.clone(),
        query: query.clone(),
        policy: policy_label(router),
        handbook_version: handbook.version,
        steps,
        reward,
        total_cost,
    })
}

/// One episode per query, in parallel, returned in query order. Episodes
/// whose environment cannot be built are recorded with reward 0 and no steps.
pub fn run_episodes(
    queries: &[Query],
    handbook: &Handbook,
    factory: &dyn EnvironmentFactory,
    router: &Router<'_>,
    seed: u64,
) -> Result<Vec<Trajectory>, RouterError> {
    queries
        .par_iter()
        .map(|q| match factory.episode(q, seed) {
            Ok(mut env) => run_episode(q, handbook, env.as_mut(), router),
            Err(e) => {
                log::warn!("environment for `{}` unavailable: {e}", q.id);
                Ok(Trajectory {
                    id: q.id.clone(),
                    query: q.clone(),
                    policy: policy_label(router),
                    handbook_version: handbook.version,
                    steps: Vec::new(),
                    reward: 0.0,
                    total_cost: e.penalty_cost,
                })
            }
        })
        .collect()
}
