use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LearnError, TrajectoryBundle};
use crate::competence::{Outcome, ProfileDelta};
use crate::handbook::{AgentId, BetaCounter, Handbook, ModeId};
use crate::router::{retrieve_active_skills, TokenCosine};

/// Which signal decides whether a step counts as a success for its agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// Every step inherits the trajectory's terminal verdict.
    Trajectory,
    /// The step's own success flag, falling back to the trajectory verdict
    /// when the backend reported none.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub attribution: Attribution,
    pub success_threshold: f64,
    pub retrieval_k: usize,
    pub retrieval_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: String,
    pub query_text: String,
    pub trajectory_id: String,
    pub turn: usize,
    /// May carry an empty skill set when the mode has no skills yet; such
    /// records still contribute their cost.
    pub outcome: Outcome,
}

/// One outcome per distinct step execution. Sibling trajectories of a bundle
/// replay the steps they share with identical results; such a step counts
/// once per bundle. A step's recorded active set is used when every id in it
/// is registered under the step's mode; otherwise (trajectories collected
/// before the skills existed) retrieval is replayed against `handbook` from
/// the state before the step.
pub fn extract_outcomes(
    handbook: &Handbook,
    bundles: &[TrajectoryBundle],
    judge: &JudgeConfig,
) -> Result<Vec<OutcomeRecord>, LearnError> {
    let per_bundle: Vec<Result<Vec<OutcomeRecord>, LearnError>> = bundles
        .par_iter()
        .map(|b| {
            let mut out = Vec::new();
            let mut seen = BTreeSet::new();
            for t in &b.trajectories {
                let verdict = t.reward >= judge.success_threshold;
                for (i, step) in t.steps.iter().enumerate() {
                    if handbook.mode(&step.mode).is_none() {
                        continue;
                    }
                    let key = (
                        step.turn,
                        step.mode.as_str(),
                        step.agent.as_str(),
                        step.success,
                        step.cost.to_bits(),
                        step.trace_digest.as_str(),
                        step.observation_digest.as_str(),
                    );
                    if !seen.insert(key) {
                        continue;
                    }
                    let success = match judge.attribution {
                        Attribution::Trajectory => verdict,
                        Attribution::Step => step.success.unwrap_or(verdict),
                    };
                    let recorded_ok = !step.active_skills.is_empty()
                        && step
                            .active_skills
                            .keys()
                            .all(|id| handbook.skill(id).is_some_and(|s| s.mode == step.mode));
                    let skill_ids = if recorded_ok {
                        step.active_skills.keys().cloned().collect()
                    } else {
                        retrieve_active_skills(
                            &t.history_before(i),
                            &step.mode,
                            handbook,
                            judge.retrieval_k,
                            judge.retrieval_threshold,
                            &TokenCosine,
                        )?
                        .entries
                        .into_keys()
                        .collect()
                    };
                    out.push(OutcomeRecord {
                        query_id: b.query.id.clone(),
                        query_text: b.query.text.clone(),
                        trajectory_id: t.id.clone(),
                        turn: step.turn,
                        outcome: Outcome {
                            agent_id: step.agent.clone(),
                            mode: step.mode.clone(),
                            skill_ids,
                            success,
                            cost: step.cost.max(0.0),
                        },
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_bundle {
        out.extend(r?);
    }
    Ok(out)
}

/// Adds `outcomes` on top of the current counters and cost estimates.
/// Profiles are created for every allowed agent, and every profile gets a
/// prior counter for each skill of its mode that it lacks.
pub(crate) fn accumulate(handbook: &Handbook, outcomes: &[OutcomeRecord]) -> Result<Handbook, LearnError> {
    let mut next = handbook.clone();
    for m in &handbook.modes {
        for a in &m.allowed_agents {
            next.profile_entry(a, &m.mode);
        }
    }
    for o in outcomes {
        next.profile_entry(&o.outcome.agent_id, &o.outcome.mode);
    }
    let edges = next.edges.clone();
    for p in &mut next.profiles {
        for s in edges.get(&p.mode).into_iter().flatten() {
            p.counters.entry(s.clone()).or_insert(BetaCounter::PRIOR);
        }
    }

    let mut deltas: BTreeMap<(AgentId, ModeId), ProfileDelta> = BTreeMap::new();
    for o in outcomes {
        deltas
            .entry((o.outcome.agent_id.clone(), o.outcome.mode.clone()))
            .or_default()
            .record(&o.outcome);
    }
    for ((agent, mode), delta) in deltas {
        let p = next.profile_mut(&agent, &mode).expect("profile created above");
        *p = delta.apply(p)?;
    }
    Ok(next)
}

pub(crate) fn build_profiles_inner(
    handbook: &Handbook,
    bundles: &[TrajectoryBundle],
    judge: &JudgeConfig,
) -> Result<(Handbook, usize), LearnError> {
    let outcomes = extract_outcomes(handbook, bundles, judge)?;
    let next = accumulate(handbook, &outcomes)?;
    Ok((next, outcomes.len()))
}

/// Folds every step of the bundles into the profiles as a new handbook
/// version.
pub fn build_profiles(
    handbook: &Handbook,
    bundles: &[TrajectoryBundle],
    judge: &JudgeConfig,
) -> Result<Handbook, LearnError> {
    let (next, n) = build_profiles_inner(handbook, bundles, judge)?;
    Ok(next.next_version(&format!("profiles updated from {n} outcomes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handbook::{CostStats, ModeMetadata, Skill};
    use crate::trajectory::{Query, Step, Trajectory};

    fn hb() -> Handbook {
        let mut h = Handbook {
            version: 1,
            modes: vec![ModeMetadata {
                mode: "code".into(),
                insights: vec![],
                allowed_agents: vec!["a1".into(), "a2".into()],
            }],
            ..Default::default()
        };
        h.insert_skill(Skill {
            id: "parse".into(),
            description: String::new(),
            indicators: vec!["csv".into()],
            parent: None,
            mode: "code".into(),
        });
        h.insert_skill(Skill {
            id: "prove".into(),
            description: String::new(),
            indicators: vec!["lemma".into()],
            parent: None,
            mode: "code".into(),
        });
        h
    }

    fn traj(id: &str, text: &str, agent: &str, step_ok: bool, reward: f64) -> Trajectory {
        Trajectory {
            id: id.into(),
            query: Query { id: id.into(), text: text.into(), tags: vec![] },
            policy: "p".into(),
            handbook_version: 1,
            steps: vec![Step {
                turn: 0,
                mode: "code".into(),
                agent: agent.into(),
                active_skills: Default::default(),
                utilities: Default::default(),
                cost: 0.4,
                trace_digest: String::new(),
                observation_digest: String::new(),
                success: Some(step_ok),
                error: None,
                tie_break: None,
                unprofiled: vec![],
                lambda_c: 0.5,
            }],
            reward,
            total_cost: 0.4,
        }
    }

    fn bundles(ts: Vec<Trajectory>) -> Vec<TrajectoryBundle> {
        ts.into_iter()
            .map(|t| TrajectoryBundle { query: t.query.clone(), trajectories: vec![t] })
            .collect()
    }

    fn judge(attribution: Attribution) -> JudgeConfig {
        JudgeConfig { attribution, success_threshold: 0.5, retrieval_k: 3, retrieval_threshold: 0.05 }
    }

    #[test]
    fn counts_land_on_retrieved_skill() {
        let b = bundles(vec![
            traj("q1", "csv", "a1", true, 1.0),
            traj("q2", "csv", "a1", false, 0.0),
            traj("q3", "lemma", "a2", true, 1.0),
        ]);
        let h = build_profiles(&hb(), &b, &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(h.version, 2);
        let a1 = h.profile("a1", "code").unwrap();
        assert_eq!(a1.counters["parse"], BetaCounter { alpha: 2.0, beta: 2.0 });
        assert_eq!(a1.counters["prove"], BetaCounter::PRIOR);
        assert_eq!(a1.cost, CostStats { mean: 0.4, count: 2 });
        let a2 = h.profile("a2", "code").unwrap();
        assert_eq!(a2.counters["prove"], BetaCounter { alpha: 2.0, beta: 1.0 });
        assert!(crate::handbook::validate(&h).is_empty());
    }

    #[test]
    fn attribution_modes_differ() {
        // Step failed, trajectory succeeded anyway.
        let b = bundles(vec![traj("q1", "csv", "a1", false, 1.0)]);
        let t = build_profiles(&hb(), &b, &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(t.profile("a1", "code").unwrap().counters["parse"].alpha, 2.0);
        let s = build_profiles(&hb(), &b, &judge(Attribution::Step)).unwrap();
        assert_eq!(s.profile("a1", "code").unwrap().counters["parse"].beta, 2.0);
    }

    #[test]
    fn single_success_moves_prior_to_two_one() {
        let b = bundles(vec![traj("q1", "lemma", "a2", true, 1.0)]);
        let h = build_profiles(&hb(), &b, &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(h.profile("a2", "code").unwrap().counters["prove"], BetaCounter { alpha: 2.0, beta: 1.0 });
    }

    #[test]
    fn no_steps_in_mode_leaves_profiles_alone() {
        let once = build_profiles(&hb(), &bundles(vec![traj("q1", "csv", "a1", true, 1.0)]), &judge(Attribution::Trajectory)).unwrap();
        let mut other = traj("q2", "csv", "a1", true, 1.0);
        other.steps.clear();
        let twice = build_profiles(&once, &bundles(vec![other]), &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(once.profiles, twice.profiles);
        assert_eq!(twice.version, once.version + 1);
    }

    #[test]
    fn recorded_active_set_wins_over_replay() {
        let mut t = traj("q1", "csv", "a1", true, 1.0);
        t.steps[0].active_skills = [("prove".to_string(), 1.0)].into();
        let h = build_profiles(&hb(), &bundles(vec![t]), &judge(Attribution::Trajectory)).unwrap();
        let p = h.profile("a1", "code").unwrap();
        assert_eq!(p.counters["prove"].alpha, 2.0);
        assert_eq!(p.counters["parse"], BetaCounter::PRIOR);
    }

    #[test]
    fn replayed_sibling_step_counts_once() {
        let t1 = traj("q1", "csv", "a1", true, 1.0);
        let mut t2 = t1.clone();
        t2.id = "q1/other".into();
        let b = vec![TrajectoryBundle { query: t1.query.clone(), trajectories: vec![t1.clone(), t2] }];
        let h = build_profiles(&hb(), &b, &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(h.profile("a1", "code").unwrap().counters["parse"].alpha, 2.0);
        // Across bundles the same step is a separate execution.
        let two = bundles(vec![t1.clone(), t1]);
        let h = build_profiles(&hb(), &two, &judge(Attribution::Trajectory)).unwrap();
        assert_eq!(h.profile("a1", "code").unwrap().counters["parse"].alpha, 3.0);
    }

    #[test]
    fn unmatched_text_spreads_uniformly() {
        let b = bundles(vec![traj("q1", "zzz", "a1", true, 1.0)]);
        let h = build_profiles(&hb(), &b, &judge(Attribution::Trajectory)).unwrap();
        let a1 = h.profile("a1", "code").unwrap();
        assert_eq!(a1.counters["parse"].alpha, 2.0);
        assert_eq!(a1.counters["prove"].alpha, 2.0);
    }
}
