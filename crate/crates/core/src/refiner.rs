//! Split and merge refinement of a learned handbook.
//!
//! A skill is a split candidate when the queries it was active on fall into
//! two indicator-token clusters on which agents perform very differently.
//! Two skills of one mode are a merge candidate when no agent's success rate
//! differs significantly between them under a pooled two-proportion z-test.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::handbook::{validate, AgentId, BetaCounter, Handbook, HandbookError, Skill, SkillId};
use crate::learner::{extract_outcomes, JudgeConfig, LearnError, OutcomeRecord, TrajectoryBundle};
use crate::text::token_set;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Distinct queries a skill needs before a split is considered.
    pub min_queries: usize,
    /// Mean absolute per-agent success gap between clusters that flags a split.
    pub variance_threshold: f64,
    pub significance_alpha: f64,
    /// Observations each agent needs on both skills before a merge is considered.
    pub min_observations: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            min_queries: 6,
            variance_threshold: 0.3,
            significance_alpha: 0.05,
            min_observations: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Split,
    Merge,
}

/// Records of one side of a proposed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCluster {
    pub query_ids: Vec<String>,
    /// Indicator tokens seen in the cluster's queries, most frequent first.
    pub tokens: Vec<String>,
    /// agent → (successes, failures) on the cluster's records.
    pub counts: BTreeMap<AgentId, (u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementCandidate {
    pub kind: CandidateKind,
    /// One skill for a split, two for a merge.
    pub targets: Vec<SkillId>,
    /// Mean cluster gap (split) or largest per-agent |z| (merge).
    pub statistic: f64,
    /// agent → counter snapshot per target, in target order.
    pub evidence: BTreeMap<AgentId, Vec<BetaCounter>>,
    #[serde(default)]
    pub clusters: Vec<SplitCluster>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("conflicting candidates: {0}")]
    Conflict(String),
    #[error("candidate references unknown skill `{0}`")]
    UnknownSkill(SkillId),
    #[error("malformed candidate: {0}")]
    Malformed(String),
    #[error("refined handbook is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Handbook(#[from] HandbookError),
}

// ── Split detection ─────────────────────────────────────────────────────

struct QueryFeature {
    id: String,
    tokens: BTreeSet<String>,
}

/// Two-way clustering by indicator overlap. Seeds are the most dissimilar
/// pair; each pass assigns the queries with a strict preference and grows
/// the cluster vocabularies, until nothing changes. Leftover ties go to the
/// first cluster.
fn two_clusters(features: &[QueryFeature]) -> Option<Vec<usize>> {
    let n = features.len();
    let mut seeds = None;
    let mut worst = 1.0;
    for i in 0..n {
        for j in i + 1..n {
            let sim = crate::text::jaccard(&features[i].tokens, &features[j].tokens);
            if sim < worst {
                worst = sim;
                seeds = Some((i, j));
            }
        }
    }
    let (a, b) = seeds?;
    let mut assign: Vec<Option<usize>> = vec![None; n];
    assign[a] = Some(0);
    assign[b] = Some(1);
    let mut vocab = [features[a].tokens.clone(), features[b].tokens.clone()];
    loop {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            if assign[i].is_some() {
                continue;
            }
            let o0 = f.tokens.intersection(&vocab[0]).count();
            let o1 = f.tokens.intersection(&vocab[1]).count();
            let pick = match o0.cmp(&o1) {
                std::cmp::Ordering::Greater => 0,
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Equal => continue,
            };
            assign[i] = Some(pick);
            vocab[pick].extend(f.tokens.iter().cloned());
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Some(assign.into_iter().map(|c| c.unwrap_or(0)).collect())
}

fn split_candidate(
    handbook: &Handbook,
    skill: &Skill,
    records: &[&OutcomeRecord],
    cfg: &RefinerConfig,
) -> Option<RefinementCandidate> {
    let indicators: BTreeSet<String> = skill.indicators.iter().flat_map(|i| token_set(i)).collect();
    let mut by_query: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        by_query.entry(&r.query_id).or_insert_with(|| {
            token_set(&r.query_text).intersection(&indicators).cloned().collect()
        });
    }
    if by_query.len() < cfg.min_queries {
        return None;
    }
    let features: Vec<QueryFeature> = by_query
        .into_iter()
        .map(|(id, tokens)| QueryFeature { id: id.to_string(), tokens })
        .collect();
    let assign = two_clusters(&features)?;
    let cluster_of: BTreeMap<&str, usize> =
        features.iter().zip(&assign).map(|(f, c)| (f.id.as_str(), *c)).collect();

    let mut clusters: Vec<SplitCluster> = (0..2)
        .map(|c| SplitCluster {
            query_ids: features
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(f, _)| f.id.clone())
                .collect(),
            tokens: Vec::new(),
            counts: BTreeMap::new(),
        })
        .collect();
    if clusters.iter().any(|c| c.query_ids.is_empty()) {
        return None;
    }
    for (c, cluster) in clusters.iter_mut().enumerate() {
        let mut freq: BTreeMap<&String, usize> = BTreeMap::new();
        for (f, _) in features.iter().zip(&assign).filter(|(_, a)| **a == c) {
            for t in &f.tokens {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
        cluster.tokens = ranked.into_iter().map(|(t, _)| t.clone()).collect();
    }
    for r in records {
        let c = cluster_of[r.query_id.as_str()];
        let e = clusters[c].counts.entry(r.outcome.agent_id.clone()).or_default();
        if r.outcome.success {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }

    let rate = |(s, f): (u64, u64)| s as f64 / (s + f) as f64;
    let gaps: Vec<f64> = clusters[0]
        .counts
        .iter()
        .filter_map(|(agent, &c0)| clusters[1].counts.get(agent).map(|&c1| (rate(c0) - rate(c1)).abs()))
        .collect();
    if gaps.is_empty() {
        return None;
    }
    let statistic = gaps.iter().sum::<f64>() / gaps.len() as f64;
    (statistic > cfg.variance_threshold).then(|| RefinementCandidate {
        kind: CandidateKind::Split,
        targets: vec![skill.id.clone()],
        statistic,
        evidence: snapshot(handbook, &[&skill.id]),
        clusters,
    })
}

fn snapshot(handbook: &Handbook, targets: &[&SkillId]) -> BTreeMap<AgentId, Vec<BetaCounter>> {
    let mode = targets.first().and_then(|t| handbook.skill(t)).map(|s| s.mode.clone());
    handbook
        .profiles
        .iter()
        .filter(|p| Some(&p.mode) == mode.as_ref())
        .map(|p| (p.agent_id.clone(), targets.iter().map(|t| p.counter(t)).collect()))
        .collect()
}

/// Only top-level skills without children can be split, which keeps the
/// hierarchy at two levels.
pub fn find_split_candidates(
    handbook: &Handbook,
    records: &[OutcomeRecord],
    cfg: &RefinerConfig,
) -> Vec<RefinementCandidate> {
    handbook
        .skills
        .par_iter()
        .filter(|s| s.parent.is_none() && handbook.children(&s.id).is_empty())
        .filter_map(|s| {
            let rs: Vec<&OutcomeRecord> = records
                .iter()
                .filter(|r| r.outcome.mode == s.mode && r.outcome.skill_ids.contains(&s.id))
                .collect();
            split_candidate(handbook, s, &rs, cfg)
        })
        .collect()
}

// ── Merge detection ─────────────────────────────────────────────────────

/// Pooled two-proportion z statistic; zero when the pooled rate is 0 or 1.
pub fn two_proportion_z(s1: f64, n1: f64, s2: f64, n2: f64) -> f64 {
    let pooled = (s1 + s2) / (n1 + n2);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
    if se == 0.0 || !se.is_finite() {
        return 0.0;
    }
    (s1 / n1 - s2 / n2) / se
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * (1.0 - n.cdf(z.abs()))
}

/// Same-mode pairs of childless skills with the same parent.
pub fn find_merge_candidates(handbook: &Handbook, cfg: &RefinerConfig) -> Vec<RefinementCandidate> {
    let mut pairs = Vec::new();
    for ids in handbook.edges.values() {
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                pairs.push((a, b));
            }
        }
    }
    pairs
        .par_iter()
        .filter_map(|&(a, b)| {
            let (sa, sb) = (handbook.skill(a)?, handbook.skill(b)?);
            if sa.parent != sb.parent || !handbook.children(a).is_empty() || !handbook.children(b).is_empty() {
                return None;
            }
            let profiles: Vec<_> = handbook.profiles.iter().filter(|p| p.mode == sa.mode).collect();
            if profiles.is_empty() {
                return None;
            }
            let mut worst: f64 = 0.0;
            for p in profiles {
                let (ca, cb) = (p.counter(a), p.counter(b));
                let (na, nb) = (ca.observations(), cb.observations());
                if na < cfg.min_observations || nb < cfg.min_observations {
                    return None;
                }
                let z = two_proportion_z(ca.successes(), na, cb.successes(), nb);
                if two_sided_p(z) < cfg.significance_alpha {
                    return None;
                }
                worst = worst.max(z.abs());
            }
            Some(RefinementCandidate {
                kind: CandidateKind::Merge,
                targets: vec![a.clone(), b.clone()],
                statistic: worst,
                evidence: snapshot(handbook, &[a, b]),
                clusters: Vec::new(),
            })
        })
        .collect()
}

// ── Review ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject { reason: String },
    /// Apply this candidate instead.
    Revise { candidate: RefinementCandidate },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("reviewer `{reviewer}` failed: {message}")]
pub struct ReviewerError {
    pub reviewer: String,
    pub message: String,
}

pub trait Reviewer: Send + Sync {
    fn name(&self) -> String;
    fn review(&self, candidate: &RefinementCandidate, handbook: &Handbook) -> Result<Verdict, ReviewerError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AutoApprove;

impl Reviewer for AutoApprove {
    fn name(&self) -> String {
        "auto-approve".into()
    }

    fn review(&self, _c: &RefinementCandidate, _h: &Handbook) -> Result<Verdict, ReviewerError> {
        Ok(Verdict::Approve)
    }
}

// ── Application ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineReport {
    pub split_candidates: usize,
    pub merge_candidates: usize,
    pub applied: Vec<String>,
    pub rejected: Vec<String>,
    /// Candidates dropped before review because they overlapped another.
    pub conflicts: Vec<String>,
}

fn describe(c: &RefinementCandidate) -> String {
    format!("{:?} {} ({:.4})", c.kind, c.targets.join("+"), c.statistic).to_lowercase()
}

fn check_conflicts(candidates: &[RefinementCandidate]) -> Result<(), RefineError> {
    let mut seen: BTreeMap<&str, &RefinementCandidate> = BTreeMap::new();
    for c in candidates {
        for t in &c.targets {
            if let Some(prev) = seen.insert(t, c) {
                return Err(RefineError::Conflict(format!(
                    "skill `{t}` appears in both `{}` and `{}`",
                    describe(prev),
                    describe(c)
                )));
            }
        }
    }
    Ok(())
}

fn unique_id(h: &Handbook, base: &str, taken: &BTreeSet<String>) -> String {
    if h.skill(base).is_none() && !taken.contains(base) {
        return base.to_string();
    }
    (2..)
        .map(|n| format!("{base}_{n}"))
        .find(|id| h.skill(id).is_none() && !taken.contains(id))
        .expect("unbounded search")
}

fn apply_split(h: &mut Handbook, c: &RefinementCandidate) -> Result<(), RefineError> {
    let [target] = c.targets.as_slice() else {
        return Err(RefineError::Malformed("split needs exactly one target".into()));
    };
    if c.clusters.len() != 2 {
        return Err(RefineError::Malformed("split needs two clusters".into()));
    }
    let parent = h.skill(target).cloned().ok_or_else(|| RefineError::UnknownSkill(target.clone()))?;
    let mut taken = BTreeSet::new();
    let mut child_ids = Vec::new();
    for (i, cl) in c.clusters.iter().enumerate() {
        let top = cl.tokens.first().cloned().unwrap_or_else(|| format!("part{i}"));
        let id = unique_id(h, &format!("{}/{top}", parent.id), &taken);
        taken.insert(id.clone());
        child_ids.push(id.clone());
        h.insert_skill(Skill {
            id,
            description: format!("{} ({top} cases)", parent.description).trim().to_string(),
            indicators: if cl.tokens.is_empty() { parent.indicators.clone() } else { cl.tokens.clone() },
            parent: Some(parent.id.clone()),
            mode: parent.mode.clone(),
        });
    }
    // The first child takes its cluster's records (capped by the parent's
    // mass); the second takes the remainder, so the children always sum to
    // the parent exactly. The parent keeps only the prior.
    for p in h.profiles.iter_mut().filter(|p| p.mode == parent.mode) {
        let pc = p.counter(&parent.id);
        let (s0, f0) = c.clusters[0].counts.get(&p.agent_id).copied().unwrap_or((0, 0));
        let s0 = (s0 as f64).min(pc.successes());
        let f0 = (f0 as f64).min(pc.failures());
        p.counters.insert(
            child_ids[0].clone(),
            BetaCounter { alpha: BetaCounter::PRIOR.alpha + s0, beta: BetaCounter::PRIOR.beta + f0 },
        );
        p.counters.insert(
            child_ids[1].clone(),
            BetaCounter {
                alpha: BetaCounter::PRIOR.alpha + pc.successes() - s0,
                beta: BetaCounter::PRIOR.beta + pc.failures() - f0,
            },
        );
        p.counters.insert(parent.id.clone(), BetaCounter::PRIOR);
    }
    Ok(())
}

fn apply_merge(h: &mut Handbook, c: &RefinementCandidate) -> Result<(), RefineError> {
    let [a, b] = c.targets.as_slice() else {
        return Err(RefineError::Malformed("merge needs exactly two targets".into()));
    };
    let sa = h.skill(a).cloned().ok_or_else(|| RefineError::UnknownSkill(a.clone()))?;
    let sb = h.skill(b).cloned().ok_or_else(|| RefineError::UnknownSkill(b.clone()))?;
    if sa.mode != sb.mode {
        return Err(RefineError::Malformed(format!("`{a}` and `{b}` are in different modes")));
    }
    // Keep whichever comes first in the registry.
    let pos = |id: &str| h.skills.iter().position(|s| s.id == id);
    let (keep, drop) = if pos(a) <= pos(b) { (sa, sb) } else { (sb, sa) };
    for p in h.profiles.iter_mut().filter(|p| p.mode == keep.mode) {
        let (ck, cd) = (p.counter(&keep.id), p.counter(&drop.id));
        p.counters.insert(
            keep.id.clone(),
            BetaCounter {
                alpha: ck.alpha + cd.alpha - BetaCounter::PRIOR.alpha,
                beta: ck.beta + cd.beta - BetaCounter::PRIOR.beta,
            },
        );
    }
    if let Some(s) = h.skills.iter_mut().find(|s| s.id == keep.id) {
        for ind in &drop.indicators {
            if !s.indicators.contains(ind) {
                s.indicators.push(ind.clone());
            }
        }
    }
    h.remove_skill(&drop.id);
    Ok(())
}

pub(crate) fn apply_inner(
    handbook: &Handbook,
    candidates: &[RefinementCandidate],
    reviewer: &dyn Reviewer,
    report: &mut RefineReport,
) -> Result<Handbook, RefineError> {
    check_conflicts(candidates)?;
    let mut next = handbook.clone();
    for c in candidates {
        let verdict = match reviewer.review(c, &next) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{e}; candidate left unapplied");
                report.rejected.push(format!("{}: {}", describe(c), e.message));
                continue;
            }
        };
        let chosen = match verdict {
            Verdict::Approve => c.clone(),
            Verdict::Revise { candidate } => candidate,
            Verdict::Reject { reason } => {
                report.rejected.push(format!("{}: {reason}", describe(c)));
                continue;
            }
        };
        match chosen.kind {
            CandidateKind::Split => apply_split(&mut next, &chosen)?,
            CandidateKind::Merge => apply_merge(&mut next, &chosen)?,
        }
        report.applied.push(describe(&chosen));
    }
    let violations = validate(&next);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(RefineError::Invalid(text.join("; ")));
    }
    Ok(next)
}

/// Applies reviewer-approved candidates as one new handbook version.
/// Candidates sharing a skill are rejected up front.
pub fn apply_refinements(
    handbook: &Handbook,
    candidates: &[RefinementCandidate],
    reviewer: &dyn Reviewer,
) -> Result<(Handbook, RefineReport), RefineError> {
    let mut report = RefineReport::default();
    let next = apply_inner(handbook, candidates, reviewer, &mut report)?;
    let note = format!("refine: {} applied, {} rejected", report.applied.len(), report.rejected.len());
    Ok((next.next_version(&note), report))
}

/// Full refinement stage: detect on the bundles, drop merges that touch a
/// split target or an earlier merge, apply, bump the version once.
pub fn refine(
    handbook: &Handbook,
    bundles: &[TrajectoryBundle],
    judge: &JudgeConfig,
    reviewer: &dyn Reviewer,
    cfg: &RefinerConfig,
) -> Result<(Handbook, RefineReport), RefineError> {
    let records = extract_outcomes(handbook, bundles, judge)?;
    let splits = find_split_candidates(handbook, &records, cfg);
    let merges = find_merge_candidates(handbook, cfg);
    let mut report = RefineReport {
        split_candidates: splits.len(),
        merge_candidates: merges.len(),
        ..Default::default()
    };
    let mut used: BTreeSet<SkillId> = splits.iter().flat_map(|c| c.targets.clone()).collect();
    let mut chosen = splits;
    for m in merges {
        if m.targets.iter().any(|t| used.contains(t)) {
            report.conflicts.push(describe(&m));
            continue;
        }
        used.extend(m.targets.iter().cloned());
        chosen.push(m);
    }
    let next = apply_inner(handbook, &chosen, reviewer, &mut report)?;
    let note = format!(
        "refine: {} splits and {} merges found, {} applied",
        report.split_candidates,
        report.merge_candidates,
        report.applied.len()
    );
    Ok((next.next_version(&note), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::competence::Outcome;
    use crate::handbook::{AgentProfile, ModeMetadata};

    fn hb(skills: &[&str], counters: &[(&str, &str, (f64, f64))]) -> Handbook {
        let mut h = Handbook {
            version: 4,
            modes: vec![ModeMetadata {
                mode: "code".into(),
                insights: vec![],
                allowed_agents: vec!["a1".into(), "a2".into()],
            }],
            ..Default::default()
        };
        for s in skills {
            h.insert_skill(Skill {
                id: s.to_string(),
                description: format!("{s} work"),
                indicators: vec![format!("{s}x"), format!("{s}y"), format!("{s}z"), format!("{s}w")],
                parent: None,
                mode: "code".into(),
            });
        }
        for (agent, skill, (a, b)) in counters {
            let p = h.profile_entry(agent, "code");
            p.counters.insert(skill.to_string(), BetaCounter { alpha: *a, beta: *b });
        }
        h
    }

    fn rec(q: &str, text: &str, agent: &str, skill: &str, success: bool) -> OutcomeRecord {
        OutcomeRecord {
            query_id: q.into(),
            query_text: text.into(),
            trajectory_id: q.into(),
            turn: 0,
            outcome: Outcome {
                agent_id: agent.into(),
                mode: "code".into(),
                skill_ids: [skill.to_string()].into(),
                success,
                cost: 0.1,
            },
        }
    }

    #[test]
    fn maximal_contrast_is_split_with_gap_one() {
        let h = hb(&["s"], &[]);
        let mut rs = Vec::new();
        for i in 0..4 {
            let ta = if i % 2 == 0 { "sx sy" } else { "sx" };
            let tb = if i % 2 == 0 { "sz sw" } else { "sw" };
            for a in ["a1", "a2"] {
                rs.push(rec(&format!("qa{i}"), ta, a, "s", true));
                rs.push(rec(&format!("qb{i}"), tb, a, "s", false));
            }
        }
        let c = find_split_candidates(&h, &rs, &RefinerConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].statistic, 1.0);
        let mut qa: Vec<String> = c[0].clusters.iter().find(|cl| cl.query_ids.contains(&"qa0".to_string())).unwrap().query_ids.clone();
        qa.sort();
        assert_eq!(qa, vec!["qa0", "qa1", "qa2", "qa3"]);
    }

    #[test]
    fn uniform_success_is_not_split() {
        let h = hb(&["s"], &[]);
        let mut rs = Vec::new();
        for i in 0..10 {
            let t = if i % 2 == 0 { "sx sy" } else { "sz sw" };
            for k in 0..10 {
                rs.push(rec(&format!("q{i}"), t, "a1", "s", k < 7));
            }
        }
        assert!(find_split_candidates(&h, &rs, &RefinerConfig::default()).is_empty());
    }

    #[test]
    fn identical_counters_merge() {
        let h = hb(&["s", "t"], &[("a1", "s", (9.0, 5.0)), ("a1", "t", (9.0, 5.0)), ("a2", "s", (4.0, 12.0)), ("a2", "t", (4.0, 12.0))]);
        let c = find_merge_candidates(&h, &RefinerConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].statistic, 0.0);
    }

    #[test]
    fn significant_difference_blocks_merge() {
        // 45/50 vs 5/50: z = 0.8 / sqrt(0.25 * 0.04) = 8.
        let z = two_proportion_z(45.0, 50.0, 5.0, 50.0);
        assert!((z - 8.0).abs() < 1e-12);
        let h = hb(&["s", "t"], &[("a1", "s", (46.0, 6.0)), ("a1", "t", (6.0, 46.0)), ("a2", "s", (20.0, 20.0)), ("a2", "t", (20.0, 20.0))]);
        assert!(find_merge_candidates(&h, &RefinerConfig::default()).is_empty());
    }

    #[test]
    fn prior_only_pair_is_guarded() {
        let h = hb(&["s", "t"], &[("a1", "s", (1.0, 1.0)), ("a1", "t", (1.0, 1.0))]);
        assert!(find_merge_candidates(&h, &RefinerConfig::default()).is_empty());
    }

    #[test]
    fn merge_sums_minus_prior() {
        let h = hb(&["s", "t"], &[("a1", "s", (4.0, 2.0)), ("a1", "t", (4.0, 2.0))]);
        let c = RefinementCandidate {
            kind: CandidateKind::Merge,
            targets: vec!["s".into(), "t".into()],
            statistic: 0.0,
            evidence: BTreeMap::new(),
            clusters: vec![],
        };
        let (next, report) = apply_refinements(&h, &[c], &AutoApprove).unwrap();
        assert_eq!(next.version, 5);
        assert_eq!(next.profile("a1", "code").unwrap().counters["s"], BetaCounter { alpha: 7.0, beta: 3.0 });
        assert!(next.skill("t").is_none());
        assert_eq!(next.edges["code"], vec!["s".to_string()]);
        assert_eq!(report.applied.len(), 1);
    }

    #[test]
    fn split_partitions_records() {
        // 8 successes, 5 in the first cluster and 3 in the second.
        let mut h = hb(&["s"], &[("a1", "s", (9.0, 1.0))]);
        h.profiles.push(AgentProfile::new("a2", "code"));
        let c = RefinementCandidate {
            kind: CandidateKind::Split,
            targets: vec!["s".into()],
            statistic: 1.0,
            evidence: BTreeMap::new(),
            clusters: vec![
                SplitCluster { query_ids: vec!["q1".into()], tokens: vec!["sx".into()], counts: [("a1".to_string(), (5, 0))].into() },
                SplitCluster { query_ids: vec!["q2".into()], tokens: vec!["sz".into()], counts: [("a1".to_string(), (3, 0))].into() },
            ],
        };
        let (next, _) = apply_refinements(&h, &[c], &AutoApprove).unwrap();
        let p = next.profile("a1", "code").unwrap();
        assert_eq!(p.counters["s/sx"], BetaCounter { alpha: 6.0, beta: 1.0 });
        assert_eq!(p.counters["s/sz"], BetaCounter { alpha: 4.0, beta: 1.0 });
        assert_eq!(p.counters["s"], BetaCounter::PRIOR);
        assert_eq!(next.skill("s/sx").unwrap().parent.as_deref(), Some("s"));
        let p2 = next.profile("a2", "code").unwrap();
        assert_eq!(p2.counters["s/sx"], BetaCounter::PRIOR);
    }

    #[test]
    fn empty_candidate_list_only_bumps() {
        let h = hb(&["s"], &[]);
        let (next, _) = apply_refinements(&h, &[], &AutoApprove).unwrap();
        assert_eq!(next.version, h.version + 1);
        assert_eq!(next.skills, h.skills);
    }

    #[test]
    fn conflicting_candidates_rejected() {
        let h = hb(&["s", "t"], &[]);
        let split = RefinementCandidate {
            kind: CandidateKind::Split,
            targets: vec!["s".into()],
            statistic: 1.0,
            evidence: BTreeMap::new(),
            clusters: vec![],
        };
        let merge = RefinementCandidate {
            kind: CandidateKind::Merge,
            targets: vec!["s".into(), "t".into()],
            ..split.clone()
        };
        let err = apply_refinements(&h, &[split, merge], &AutoApprove).unwrap_err();
        assert!(matches!(err, RefineError::Conflict(ref m) if m.contains("`s`")));
    }
}
