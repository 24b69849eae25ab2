//! Beta-Bernoulli competence counters and running cost estimates.
//!
//! All updates are pure: they take a profile by reference and return a new
//! one. Batches computed in parallel are combined through [`ProfileDelta`],
//! whose merge simply concatenates observations in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{AgentId, AgentProfile, BetaCounter, Handbook, ModeId, SkillId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub agent_id: AgentId,
    pub mode: ModeId,
    pub skill_ids: BTreeSet<SkillId>,
    pub success: bool,
    /// Normalized cost units.
    pub cost: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CompetenceError {
    #[error("outcome for ({agent}, {mode}) applied to profile ({profile_agent}, {profile_mode})")]
    Mismatch {
        agent: AgentId,
        mode: ModeId,
        profile_agent: AgentId,
        profile_mode: ModeId,
    },
    #[error("skill `{skill}` is not registered under mode `{mode}`")]
    UnknownSkill { skill: SkillId, mode: ModeId },
    #[error("outcome has an empty skill set")]
    EmptySkillSet,
    #[error("cost must be finite and non-negative, got {0}")]
    NegativeCost(f64),
    #[error("reference cost must be positive, got {0}")]
    BadReference(f64),
}

/// Posterior mean α/(α+β); the Beta(1,1) prior applies when there is no entry.
pub fn posterior_mean(profile: &AgentProfile, skill: &str) -> f64 {
    profile.counter(skill).mean()
}

fn check_outcome(
    profile: &AgentProfile,
    o: &Outcome,
    handbook: &Handbook,
) -> Result<(), CompetenceError> {
    if o.agent_id != profile.agent_id || o.mode != profile.mode {
        return Err(CompetenceError::Mismatch {
            agent: o.agent_id.clone(),
            mode: o.mode.clone(),
            profile_agent: profile.agent_id.clone(),
            profile_mode: profile.mode.clone(),
        });
    }
    if o.skill_ids.is_empty() {
        return Err(CompetenceError::EmptySkillSet);
    }
    for sid in &o.skill_ids {
        match handbook.skill(sid) {
            Some(s) if s.mode == profile.mode => {}
            _ => {
                return Err(CompetenceError::UnknownSkill {
                    skill: sid.clone(),
                    mode: profile.mode.clone(),
                })
            }
        }
    }
    Ok(())
}

/// Adds one to α (success) or β (failure) for every active skill of every
/// outcome. Costs are not touched; see [`update_cost`].
pub fn update_counters(
    profile: &AgentProfile,
    outcomes: &[Outcome],
    handbook: &Handbook,
) -> Result<AgentProfile, CompetenceError> {
    for o in outcomes {
        check_outcome(profile, o, handbook)?;
    }
    let mut next = profile.clone();
    for o in outcomes {
        for sid in &o.skill_ids {
            let c = next.counters.entry(sid.clone()).or_default();
            if o.success {
                c.alpha += 1.0;
            } else {
                c.beta += 1.0;
            }
        }
    }
    Ok(next)
}

/// Exact running mean: `mean += (c - mean) / (n + 1)`.
pub fn update_cost(profile: &AgentProfile, observed: f64) -> Result<AgentProfile, CompetenceError> {
    if !(observed.is_finite() && observed >= 0.0) {
        return Err(CompetenceError::NegativeCost(observed));
    }
    let mut next = profile.clone();
    let n = next.cost.count as f64;
    next.cost.mean += (observed - next.cost.mean) / (n + 1.0);
    next.cost.count += 1;
    Ok(next)
}

/// Maps a raw cost (currency, tokens) onto normalized cost units.
pub fn normalize_cost(raw: f64, reference: f64) -> Result<f64, CompetenceError> {
    if !(reference.is_finite() && reference > 0.0) {
        return Err(CompetenceError::BadReference(reference));
    }
    if !(raw.is_finite() && raw >= 0.0) {
        return Err(CompetenceError::NegativeCost(raw));
    }
    Ok(raw / reference)
}

// ── Deltas ──────────────────────────────────────────────────────────────

/// Observations for one (agent, mode) accumulated independently of a profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileDelta {
    /// skill → (successes, failures)
    pub counts: BTreeMap<SkillId, (u64, u64)>,
    /// Observed costs in arrival order.
    pub costs: Vec<f64>,
}

impl ProfileDelta {
    pub fn record(&mut self, outcome: &Outcome) {
        for sid in &outcome.skill_ids {
            let e = self.counts.entry(sid.clone()).or_default();
            if outcome.success {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        self.costs.push(outcome.cost);
    }

    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let mut d = Self::default();
        for o in outcomes {
            d.record(o);
        }
        d
    }

    /// Sums counts; `other`'s costs follow `self`'s.
    pub fn merge(mut self, other: ProfileDelta) -> ProfileDelta {
        for (sid, (s, f)) in other.counts {
            let e = self.counts.entry(sid).or_default();
            e.0 += s;
            e.1 += f;
        }
        self.costs.extend(other.costs);
        self
    }

    pub fn apply(&self, profile: &AgentProfile) -> Result<AgentProfile, CompetenceError> {
        let mut next = profile.clone();
        for (sid, (s, f)) in &self.counts {
            let c = next.counters.entry(sid.clone()).or_insert(BetaCounter::PRIOR);
            c.alpha += *s as f64;
            c.beta += *f as f64;
        }
        for &cost in &self.costs {
            next = update_cost(&next, cost)?;
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handbook::{ModeMetadata, Skill};
    use proptest::prelude::*;

    fn fixture() -> (Handbook, AgentProfile) {
        let mut h = Handbook {
            modes: vec![ModeMetadata {
                mode: "code".into(),
                insights: vec![],
                allowed_agents: vec!["a".into()],
            }],
            ..Default::default()
        };
        for id in ["s0", "s1", "s2", "s3"] {
            h.insert_skill(Skill {
                id: id.into(),
                description: String::new(),
                indicators: vec![],
                parent: None,
                mode: "code".into(),
            });
        }
        (h, AgentProfile::new("a", "code"))
    }

    fn outcome(skills: &[&str], success: bool) -> Outcome {
        Outcome {
            agent_id: "a".into(),
            mode: "code".into(),
            skill_ids: skills.iter().map(|s| s.to_string()).collect(),
            success,
            cost: 0.1,
        }
    }

    #[test]
    fn three_successes_one_failure() {
        let (h, p) = fixture();
        let os = vec![
            outcome(&["s0"], true),
            outcome(&["s0"], true),
            outcome(&["s0"], true),
            outcome(&["s0"], false),
        ];
        let n = update_counters(&p, &os, &h).unwrap();
        assert_eq!(n.counter("s0"), BetaCounter { alpha: 4.0, beta: 2.0 });
        assert!((posterior_mean(&n, "s0") - 4.0 / 6.0).abs() < 1e-9);
        assert_eq!(p.counters.len(), 0, "input untouched");
    }

    #[test]
    fn empty_outcomes_identity() {
        let (h, p) = fixture();
        assert_eq!(update_counters(&p, &[], &h).unwrap(), p);
    }

    #[test]
    fn prior_mean_and_ten_successes() {
        let (h, p) = fixture();
        assert_eq!(posterior_mean(&p, "s1"), 0.5);
        let os: Vec<_> = (0..10).map(|_| outcome(&["s1"], true)).collect();
        let n = update_counters(&p, &os, &h).unwrap();
        assert!((posterior_mean(&n, "s1") - 11.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn mismatch_and_unknown_skill() {
        let (h, p) = fixture();
        let mut o = outcome(&["s0"], true);
        o.agent_id = "b".into();
        assert!(matches!(
            update_counters(&p, &[o], &h),
            Err(CompetenceError::Mismatch { .. })
        ));
        assert!(matches!(
            update_counters(&p, &[outcome(&["nope"], true)], &h),
            Err(CompetenceError::UnknownSkill { .. })
        ));
        assert_eq!(
            update_counters(&p, &[outcome(&[], true)], &h),
            Err(CompetenceError::EmptySkillSet)
        );
    }

    #[test]
    fn cost_running_mean() {
        let (_, p) = fixture();
        let p1 = update_cost(&p, 0.4).unwrap();
        assert_eq!((p1.cost.mean, p1.cost.count), (0.4, 1));
        let p2 = update_cost(&p1, 0.0).unwrap();
        assert!((p2.cost.mean - 0.2).abs() < 1e-15);
        assert_eq!(p2.cost.count, 2);
        assert_eq!(update_cost(&p, -0.1), Err(CompetenceError::NegativeCost(-0.1)));
    }

    #[test]
    fn cost_mean_matches_naive_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (_, mut p) = fixture();
        let costs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..2.0)).collect();
        for &c in &costs {
            p = update_cost(&p, c).unwrap();
        }
        let naive = costs.iter().sum::<f64>() / costs.len() as f64;
        assert!((p.cost.mean - naive).abs() < 1e-9);
        assert_eq!(p.cost.count, 1000);
    }

    #[test]
    fn normalize() {
        assert!((normalize_cost(0.002, 0.01).unwrap() - 0.2).abs() < 1e-15);
        assert!(normalize_cost(1.0, 0.0).is_err());
    }

    fn arb_outcomes() -> impl Strategy<Value = Vec<(Vec<usize>, bool)>> {
        prop::collection::vec(
            (prop::collection::vec(0usize..4, 1..4), any::<bool>()),
            0..60,
        )
    }

    fn build(spec: &[(Vec<usize>, bool)]) -> Vec<Outcome> {
        spec.iter()
            .map(|(sk, ok)| {
                let names: Vec<String> = sk.iter().map(|i| format!("s{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                outcome(&refs, *ok)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn counter_mass_conserved(spec in arb_outcomes()) {
            let (h, p) = fixture();
            let os = build(&spec);
            let n = update_counters(&p, &os, &h).unwrap();
            let incidences: usize = os.iter().map(|o| o.skill_ids.len()).sum();
            let mass: f64 = n.counters.values().map(|c| c.alpha + c.beta - 2.0).sum();
            prop_assert_eq!(mass, incidences as f64);
        }

        #[test]
        fn order_independent(spec in arb_outcomes(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (h, p) = fixture();
            let os = build(&spec);
            let mut shuffled = os.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                update_counters(&p, &os, &h).unwrap().counters,
                update_counters(&p, &shuffled, &h).unwrap().counters
            );
        }

        #[test]
        fn mean_strictly_inside_and_monotone(a in 0.01f64..500.0, b in 0.01f64..500.0) {
            let (h, mut p) = fixture();
            p.counters.insert("s0".into(), BetaCounter { alpha: a, beta: b });
            let m = posterior_mean(&p, "s0");
            prop_assert!(m > 0.0 && m < 1.0);
            let up = update_counters(&p, &[outcome(&["s0"], true)], &h).unwrap();
            let down = update_counters(&p, &[outcome(&["s0"], false)], &h).unwrap();
            prop_assert!(posterior_mean(&up, "s0") > m);
            prop_assert!(posterior_mean(&down, "s0") < m);
        }

        #[test]
        fn delta_merge_matches_sequential(spec in arb_outcomes(), cut in 0usize..60) {
            let (h, p) = fixture();
            let os = build(&spec);
            let cut = cut.min(os.len());
            let merged = ProfileDelta::from_outcomes(&os[..cut])
                .merge(ProfileDelta::from_outcomes(&os[cut..]));
            let via_delta = merged.apply(&p).unwrap();
            let direct = update_counters(&p, &os, &h).unwrap();
            prop_assert_eq!(&via_delta.counters, &direct.counters);
            prop_assert_eq!(via_delta.cost.count as usize, os.len());
        }
    }
}
