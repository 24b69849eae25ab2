use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TrajectoryBundle;
use crate::handbook::{AgentId, ModeId};
use crate::text::token_set;
use crate::trajectory::{Step, Trajectory};

/// Where a successful and a failed trajectory first part ways at a mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub positive_turn: usize,
    pub negative_turn: usize,
    pub positive_agent: AgentId,
    pub negative_agent: AgentId,
    pub positive_trace: String,
    pub negative_trace: String,
    pub positive_observation: String,
    pub negative_observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveDiff {
    pub id: String,
    pub query_id: String,
    pub mode: ModeId,
    pub positive: String,
    pub negative: String,
    pub divergence: Divergence,
}

fn mode_steps<'a>(t: &'a Trajectory, mode: &'a str) -> impl Iterator<Item = &'a Step> + 'a {
    t.steps.iter().filter(move |s| s.mode == mode)
}

/// Every (success, failure) pair in the bundle whose agents differ at some
/// step of `mode`, pointing at the first such step.
pub fn diff_trajectories(
    bundle: &TrajectoryBundle,
    mode: &str,
    success_threshold: f64,
) -> Vec<ContrastiveDiff> {
    let (pos, neg): (Vec<&Trajectory>, Vec<&Trajectory>) = bundle
        .trajectories
        .iter()
        .partition(|t| t.reward >= success_threshold);
    let mut out = Vec::new();
    for p in &pos {
        for n in &neg {
            let split = mode_steps(p, mode)
                .zip(mode_steps(n, mode))
                .find(|(a, b)| a.agent != b.agent);
            if let Some((a, b)) = split {
                out.push(ContrastiveDiff {
                    id: format!("{}|{}|{mode}", p.id, n.id),
                    query_id: bundle.query.id.clone(),
                    mode: mode.to_string(),
                    positive: p.id.clone(),
                    negative: n.id.clone(),
                    divergence: Divergence {
                        positive_turn: a.turn,
                        negative_turn: b.turn,
                        positive_agent: a.agent.clone(),
                        negative_agent: b.agent.clone(),
                        positive_trace: a.trace_digest.clone(),
                        negative_trace: b.trace_digest.clone(),
                        positive_observation: a.observation_digest.clone(),
                        negative_observation: b.observation_digest.clone(),
                    },
                });
            }
        }
    }
    out
}

/// Tokens in the successful trace that the failed trace lacks, minus the two
/// agent ids. Falls back to the successful trace's tokens (minus agent and
/// mode) when the difference is empty.
pub fn gap_tokens(d: &ContrastiveDiff) -> BTreeSet<String> {
    let pos = token_set(&d.divergence.positive_trace);
    let neg = token_set(&d.divergence.negative_trace);
    let stop: BTreeSet<String> = [
        d.divergence.positive_agent.to_lowercase(),
        d.divergence.negative_agent.to_lowercase(),
        d.mode.to_lowercase(),
    ]
    .into();
    let gap: BTreeSet<String> = pos.difference(&neg).filter(|t| !stop.contains(*t)).cloned().collect();
    if gap.is_empty() {
        pos.into_iter().filter(|t| !stop.contains(t)).collect()
    } else {
        gap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Query;

    fn traj(id: &str, agents: &[(&str, &str)], reward: f64) -> Trajectory {
        Trajectory {
            id: id.into(),
            query: Query { id: "q".into(), text: String::new(), tags: vec![] },
            policy: "p".into(),
            handbook_version: 1,
            steps: agents
                .iter()
                .enumerate()
                .map(|(i, (m, a))| Step {
                    turn: i,
                    mode: m.to_string(),
                    agent: a.to_string(),
                    active_skills: Default::default(),
                    utilities: Default::default(),
                    cost: 0.1,
                    trace_digest: format!("{a} {m} trace {}", if reward > 0.5 { "alpha beta" } else { "alpha" }),
                    observation_digest: String::new(),
                    success: Some(reward > 0.5),
                    error: None,
                    tie_break: None,
                    unprofiled: vec![],
                    lambda_c: 0.5,
                })
                .collect(),
            reward,
            total_cost: 0.1 * agents.len() as f64,
        }
    }

    fn bundle(ts: Vec<Trajectory>) -> TrajectoryBundle {
        TrajectoryBundle { query: Query { id: "q".into(), text: String::new(), tags: vec![] }, trajectories: ts }
    }

    #[test]
    fn minimal_pair() {
        let b = bundle(vec![
            traj("t1", &[("code", "a1"), ("answer", "z")], 1.0),
            traj("t2", &[("code", "a2"), ("answer", "z")], 0.0),
        ]);
        let d = diff_trajectories(&b, "code", 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].divergence.positive_agent, "a1");
        assert_eq!(d[0].divergence.negative_agent, "a2");
        assert_eq!(gap_tokens(&d[0]), ["beta".to_string()].into());
        // Same agent at the answer step: no diff there.
        assert!(diff_trajectories(&b, "answer", 0.5).is_empty());
    }

    #[test]
    fn no_contrast_when_all_succeed() {
        let b = bundle(vec![
            traj("t1", &[("code", "a1")], 1.0),
            traj("t2", &[("code", "a2")], 1.0),
        ]);
        assert!(diff_trajectories(&b, "code", 0.5).is_empty());
    }

    #[test]
    fn cross_pairs_match_enumeration() {
        let ts = vec![
            traj("p1", &[("code", "a1")], 1.0),
            traj("n1", &[("code", "a2")], 0.0),
            traj("p2", &[("code", "a3")], 1.0),
            traj("n2", &[("code", "a4")], 0.0),
        ];
        let b = bundle(ts.clone());
        let got: BTreeSet<(String, String)> = diff_trajectories(&b, "code", 0.5)
            .into_iter()
            .map(|d| (d.positive, d.negative))
            .collect();
        let mut expect = BTreeSet::new();
        for p in &ts {
            for n in &ts {
                if p.reward >= 0.5 && n.reward < 0.5 && p.steps[0].agent != n.steps[0].agent {
                    expect.insert((p.id.clone(), n.id.clone()));
                }
            }
        }
        assert_eq!(got.len(), 4);
        assert_eq!(got, expect);
    }
}
