use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::propose::SkillProposer;
use super::TrajectoryBundle;
use crate::handbook::{AgentId, Handbook, ModeId, SkillId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsightConfig {
    /// Minimum observations before a pattern is reported.
    pub min_support: usize,
    /// Failure share at or above which an (agent, skill) pair is flagged.
    pub failure_rate: f64,
    /// Share of successful trajectories a transition must appear in.
    pub min_transition_share: f64,
    /// Cap on distilled insights per mode.
    pub max_per_mode: usize,
}

impl Default for InsightConfig {
    fn default() -> Self {
        Self {
            min_support: 5,
            failure_rate: 0.6,
            min_transition_share: 0.5,
            max_per_mode: 6,
        }
    }
}

/// A recurring regularity mined from trajectories or profile counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsightPattern {
    /// `from → to` appeared in `support` of the `successes` successful
    /// trajectories.
    Transition {
        from: ModeId,
        to: ModeId,
        support: usize,
        successes: usize,
    },
    Preference {
        mode: ModeId,
        skill: SkillId,
        agent: AgentId,
        mean: f64,
        observations: usize,
    },
    SystematicFailure {
        agent: AgentId,
        mode: ModeId,
        skill: SkillId,
        failures: usize,
        observations: usize,
    },
}

impl InsightPattern {
    pub fn describe(&self) -> String {
        match self {
            Self::Transition { from, to, support, successes } => format!(
                "{from} -> {to} preceded {support} of {successes} successful trajectories"
            ),
            Self::Preference { skill, agent, mean, observations, .. } => format!(
                "for {skill} prefer {agent} (posterior mean {mean:.2} over {observations} observations)"
            ),
            Self::SystematicFailure { skill, failures, observations, .. } => {
                format!("avoid for {skill}: failed {failures} of {observations}")
            }
        }
    }
}

fn transitions(bundles: &[TrajectoryBundle], threshold: f64, cfg: &InsightConfig) -> Vec<InsightPattern> {
    let mut tally: BTreeMap<(ModeId, ModeId), usize> = BTreeMap::new();
    let mut successes = 0;
    for t in bundles.iter().flat_map(|b| &b.trajectories) {
        if t.reward < threshold {
            continue;
        }
        successes += 1;
        let seen: std::collections::BTreeSet<(ModeId, ModeId)> = t
            .steps
            .windows(2)
            .filter(|w| w[0].mode != w[1].mode)
            .map(|w| (w[0].mode.clone(), w[1].mode.clone()))
            .collect();
        for k in seen {
            *tally.entry(k).or_default() += 1;
        }
    }
    tally
        .into_iter()
        .filter(|(_, n)| *n >= cfg.min_support && *n as f64 >= cfg.min_transition_share * successes as f64)
        .map(|((from, to), support)| InsightPattern::Transition { from, to, support, successes })
        .collect()
}

fn profile_patterns(h: &Handbook, cfg: &InsightConfig) -> Vec<InsightPattern> {
    let mut out = Vec::new();
    for (mode, ids) in &h.edges {
        for skill in ids {
            let mut best: Option<(&str, f64, usize)> = None;
            for p in h.profiles.iter().filter(|p| &p.mode == mode) {
                let c = p.counter(skill);
                let n = c.observations().round() as usize;
                if n < cfg.min_support.max(1) {
                    continue;
                }
                let failures = c.failures().round() as usize;
                if failures as f64 >= cfg.failure_rate * n as f64 {
                    out.push(InsightPattern::SystematicFailure {
                        agent: p.agent_id.clone(),
                        mode: mode.clone(),
                        skill: skill.clone(),
                        failures,
                        observations: n,
                    });
                }
                let better = match best {
                    None => true,
                    Some((id, m, _)) => c.mean() > m || (c.mean() == m && p.agent_id.as_str() < id),
                };
                if better {
                    best = Some((&p.agent_id, c.mean(), n));
                }
            }
            if let Some((agent, mean, observations)) = best {
                out.push(InsightPattern::Preference {
                    mode: mode.clone(),
                    skill: skill.clone(),
                    agent: agent.to_string(),
                    mean,
                    observations,
                });
            }
        }
    }
    out
}

fn summary(h: &Handbook, agent: &str, mode: &str) -> String {
    let Some(p) = h.profile(agent, mode) else { return String::new() };
    let observed: Vec<(&SkillId, f64)> = p
        .counters
        .iter()
        .filter(|(_, c)| c.observations() > 0.0)
        .map(|(s, c)| (s, c.mean()))
        .collect();
    let strongest = observed.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(a.0)));
    let weakest = observed.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    match (strongest, weakest) {
        (Some(s), Some(w)) => format!(
            "in {mode}: strongest on {} ({:.2}), weakest on {} ({:.2}); mean cost {:.3} over {} calls",
            s.0, s.1, w.0, w.1, p.cost.mean, p.cost.count
        ),
        _ => format!("in {mode}: no skill observations; mean cost {:.3} over {} calls", p.cost.mean, p.cost.count),
    }
}

/// Returns the updated handbook and the number of new mode insights.
/// Routing signals and summaries are derived data and are rewritten; with
/// no bundles nothing changes.
pub(crate) fn distill_inner(
    bundles: &[TrajectoryBundle],
    handbook: &Handbook,
    proposer: &dyn SkillProposer,
    cfg: &InsightConfig,
    success_threshold: f64,
) -> (Handbook, usize) {
    if bundles.is_empty() {
        return (handbook.clone(), 0);
    }
    let mut next = handbook.clone();
    let mut patterns = transitions(bundles, success_threshold, cfg);
    patterns.extend(profile_patterns(handbook, cfg));

    let mut per_mode: BTreeMap<ModeId, Vec<String>> = BTreeMap::new();
    let mut signals: BTreeMap<(AgentId, ModeId), Vec<String>> = BTreeMap::new();
    for p in &patterns {
        let text = proposer.phrase_insight(p);
        match p {
            InsightPattern::Transition { from, .. } => per_mode.entry(from.clone()).or_default().push(text),
            InsightPattern::Preference { mode, .. } => per_mode.entry(mode.clone()).or_default().push(text),
            InsightPattern::SystematicFailure { agent, mode, .. } => {
                signals.entry((agent.clone(), mode.clone())).or_default().push(text)
            }
        }
    }

    let mut added = 0;
    for (mode, texts) in per_mode {
        let Some(m) = next.mode_mut(&mode) else { continue };
        for t in texts.into_iter().take(cfg.max_per_mode) {
            if !m.insights.contains(&t) {
                m.insights.push(t);
                added += 1;
            }
        }
    }
    let keys: Vec<(AgentId, ModeId)> = next.profiles.iter().map(|p| (p.agent_id.clone(), p.mode.clone())).collect();
    for (agent, mode) in keys {
        let s = summary(&next, &agent, &mode);
        let p = next.profile_mut(&agent, &mode).expect("key from profiles");
        p.routing_signals = signals.remove(&(agent.clone(), mode.clone())).unwrap_or_default();
        p.summary = s;
    }
    (next, added)
}

/// Mines transitions, per-skill preferences and systematic failures; writes
/// them as mode insights, routing signals and profile summaries.
pub fn distill_insights(
    bundles: &[TrajectoryBundle],
    handbook: &Handbook,
    proposer: &dyn SkillProposer,
    cfg: &InsightConfig,
    success_threshold: f64,
) -> Handbook {
    let (next, added) = distill_inner(bundles, handbook, proposer, cfg, success_threshold);
    next.next_version(&format!("distill {added} insights"))
}
