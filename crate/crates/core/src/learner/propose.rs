use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::diff::{gap_tokens, ContrastiveDiff};
use super::insights::InsightPattern;
use super::{LearnError, LearnerConfig};
use crate::handbook::{BetaCounter, Handbook, ModeId, Skill};
use crate::simulator::{LatentWorld, SimQuery};
use crate::text::jaccard;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProposal {
    pub skill: Skill,
    /// Ids of the diffs behind the proposal.
    pub evidence: Vec<String>,
    pub proposer: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("proposer `{proposer}` failed: {message}")]
pub struct ProposerError {
    pub proposer: String,
    pub message: String,
}

/// Diffs of one mode whose gap tokens overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffCluster {
    pub mode: ModeId,
    pub diffs: Vec<ContrastiveDiff>,
    pub tokens: BTreeSet<String>,
}

/// Turns a cluster of contrastive diffs into a skill definition.
pub trait SkillProposer: Send + Sync {
    fn name(&self) -> String;

    fn propose(&self, cluster: &DiffCluster, handbook: &Handbook) -> Result<Skill, ProposerError>;

    /// Wording for a mined routing pattern.
    fn phrase_insight(&self, pattern: &InsightPattern) -> String {
        pattern.describe()
    }
}

/// Greedy leader clustering in input order: a diff joins the first cluster
/// of its mode whose token set it overlaps by at least `threshold`.
pub fn cluster_diffs(diffs: &[ContrastiveDiff], threshold: f64) -> Vec<DiffCluster> {
    let mut clusters: Vec<DiffCluster> = Vec::new();
    for d in diffs {
        let toks = gap_tokens(d);
        match clusters
            .iter_mut()
            .find(|c| c.mode == d.mode && jaccard(&c.tokens, &toks) >= threshold)
        {
            Some(c) => {
                c.tokens.extend(toks);
                c.diffs.push(d.clone());
            }
            None => clusters.push(DiffCluster {
                mode: d.mode.clone(),
                diffs: vec![d.clone()],
                tokens: toks,
            }),
        }
    }
    clusters
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalRun {
    pub proposals: Vec<SkillProposal>,
    pub failures: Vec<String>,
    pub clusters: usize,
}

/// Clusters diffs, asks the proposer for one skill per cluster, and drops
/// proposals whose indicators overlap an existing or already accepted skill
/// of the same mode by at least the dedup threshold.
pub fn propose_skills(
    diffs: &[ContrastiveDiff],
    proposer: &dyn SkillProposer,
    handbook: &Handbook,
    config: &LearnerConfig,
) -> ProposalRun {
    let clusters = cluster_diffs(diffs, config.cluster_jaccard);
    let mut run = ProposalRun {
        clusters: clusters.len(),
        ..Default::default()
    };
    for cluster in &clusters {
        let skill = match proposer.propose(cluster, handbook) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{e}");
                run.failures.extend(
                    cluster
                        .diffs
                        .iter()
                        .map(|d| format!("{}: {}", d.id, e.message)),
                );
                continue;
            }
        };
        let evidence: Vec<String> = cluster.diffs.iter().map(|d| d.id.clone()).collect();
        let inds: BTreeSet<&str> = skill.indicators.iter().map(String::as_str).collect();
        let overlaps = |other: &Skill| {
            other.mode == skill.mode
                && jaccard(&inds, &other.indicators.iter().map(String::as_str).collect()) >= config.dedup_jaccard
        };
        if handbook.skills.iter().any(overlaps) {
            continue;
        }
        if let Some(p) = run.proposals.iter_mut().find(|p| overlaps(&p.skill)) {
            p.evidence.extend(evidence);
            continue;
        }
        let mut skill = skill;
        let taken = |id: &str| {
            handbook.skill(id).is_some() || run.proposals.iter().any(|p| p.skill.id == id)
        };
        if taken(&skill.id) {
            let base = skill.id.clone();
            let mut n = 2;
            while taken(&format!("{base}_{n}")) {
                n += 1;
            }
            skill.id = format!("{base}_{n}");
        }
        run.proposals.push(SkillProposal {
            skill,
            evidence,
            proposer: proposer.name(),
        });
    }
    run
}

pub(crate) fn insert_proposals(
    handbook: &Handbook,
    proposals: &[SkillProposal],
) -> Result<Handbook, LearnError> {
    let mut seen = BTreeSet::new();
    for p in proposals {
        let s = &p.skill;
        if handbook.skill(&s.id).is_some() || !seen.insert(s.id.as_str()) {
            return Err(LearnError::IdCollision(s.id.clone()));
        }
        if handbook.mode(&s.mode).is_none() {
            return Err(LearnError::UnknownMode(s.mode.clone()));
        }
        if p.evidence.is_empty() {
            return Err(LearnError::NoEvidence(s.id.clone()));
        }
        if let Some(parent) = &s.parent {
            let known = handbook.skill(parent).is_some_and(|ps| ps.mode == s.mode)
                || proposals.iter().any(|q| &q.skill.id == parent && q.skill.mode == s.mode);
            if !known {
                return Err(LearnError::UnknownParent {
                    skill: s.id.clone(),
                    parent: parent.clone(),
                });
            }
        }
    }
    let mut next = handbook.clone();
    for p in proposals {
        let mode = p.skill.mode.clone();
        let agents = next.mode(&mode).map(|m| m.allowed_agents.clone()).unwrap_or_default();
        for a in &agents {
            next.profile_entry(a, &mode);
        }
        for prof in next.profiles.iter_mut().filter(|pr| pr.mode == mode) {
            prof.counters.insert(p.skill.id.clone(), BetaCounter::PRIOR);
        }
        next.insert_skill(p.skill.clone());
    }
    Ok(next)
}

/// Inserts proposals as a new handbook version. Profiles of the affected
/// modes get prior counters for the new skills; existing counters are kept.
pub fn apply_proposals(handbook: &Handbook, proposals: &[SkillProposal]) -> Result<Handbook, LearnError> {
    let next = insert_proposals(handbook, proposals)?;
    Ok(next.next_version(&format!("apply {} skill proposals", proposals.len())))
}

// ── Proposers ───────────────────────────────────────────────────────────

/// Reads the simulator's latent table: the cluster's most frequent latent
/// skill becomes the proposal.
pub struct OracleProposer<'w> {
    world: &'w LatentWorld,
    queries: BTreeMap<String, SimQuery>,
}

impl<'w> OracleProposer<'w> {
    pub fn new(world: &'w LatentWorld, queries: &[SimQuery]) -> Self {
        Self {
            world,
            queries: queries.iter().map(|q| (q.query.id.clone(), q.clone())).collect(),
        }
    }
}

impl SkillProposer for OracleProposer<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn propose(&self, cluster: &DiffCluster, _handbook: &Handbook) -> Result<Skill, ProposerError> {
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &cluster.diffs {
            let Some(q) = self.queries.get(&d.query_id) else { continue };
            for lid in q.latent.get(&d.mode).into_iter().flatten() {
                *votes.entry(lid.as_str()).or_default() += 1;
            }
        }
        let lid = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l)
            .ok_or_else(|| ProposerError {
                proposer: self.name(),
                message: "no latent skill behind cluster".into(),
            })?;
        let latent = self.world.latent(lid).ok_or_else(|| ProposerError {
            proposer: self.name(),
            message: format!("latent `{lid}` missing from world"),
        })?;
        Ok(Skill {
            id: latent.id.clone(),
            description: format!(
                "capability marked by {}",
                latent.vocabulary.iter().take(2).cloned().collect::<Vec<_>>().join(" ")
            ),
            indicators: latent.vocabulary.clone(),
            parent: None,
            mode: latent.mode.clone(),
        })
    }
}

/// Dependency-free proposer: the cluster's gap tokens become indicators.
#[derive(Debug, Clone, Default)]
pub struct BaselineProposer {
    /// Upper bound on indicators per skill.
    pub max_indicators: usize,
}

impl BaselineProposer {
    pub fn new() -> Self {
        Self { max_indicators: 8 }
    }
}

impl SkillProposer for BaselineProposer {
    fn name(&self) -> String {
        "baseline".into()
    }

    fn propose(&self, cluster: &DiffCluster, _handbook: &Handbook) -> Result<Skill, ProposerError> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for d in &cluster.diffs {
            for t in gap_tokens(d) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let limit = if self.max_indicators == 0 { usize::MAX } else { self.max_indicators };
        let indicators: Vec<String> = ranked.into_iter().take(limit).map(|(t, _)| t).collect();
        let Some(first) = indicators.first() else {
            return Err(ProposerError {
                proposer: self.name(),
                message: "cluster has no gap tokens".into(),
            });
        };
        Ok(Skill {
            id: format!("{}_{first}", cluster.mode),
            description: format!(
                "capability marked by {}",
                indicators.iter().take(2).cloned().collect::<Vec<_>>().join(" ")
            ),
            indicators,
            parent: None,
            mode: cluster.mode.clone(),
        })
    }
}
