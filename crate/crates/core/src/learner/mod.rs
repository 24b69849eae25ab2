//! Handbook learning from exploratory trajectories: contrastive skill
//! discovery, profile construction, and insight distillation.

mod diff;
mod insights;
mod profiles;
mod propose;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::competence::CompetenceError;
use crate::handbook::{Handbook, HandbookError, SkillId};
use crate::trajectory::{load_jsonl, save_jsonl, LogError, Query, Trajectory};

pub use diff::{diff_trajectories, gap_tokens, ContrastiveDiff, Divergence};
pub use insights::{distill_insights, InsightConfig, InsightPattern};
pub use profiles::{build_profiles, extract_outcomes, Attribution, JudgeConfig, OutcomeRecord};
pub use propose::{
    apply_proposals, cluster_diffs, propose_skills, BaselineProposer, DiffCluster, OracleProposer,
    ProposalRun, ProposerError, SkillProposal, SkillProposer,
};

/// All trajectories collected for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBundle {
    pub query: Query,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("skill id `{0}` already exists")]
    IdCollision(SkillId),
    #[error("proposal references unknown mode `{0}`")]
    UnknownMode(String),
    #[error("proposal `{skill}` references unknown parent `{parent}`")]
    UnknownParent { skill: SkillId, parent: SkillId },
    #[error("proposal `{0}` has no evidence")]
    NoEvidence(SkillId),
    #[error(transparent)]
    Competence(#[from] CompetenceError),
    #[error(transparent)]
    Handbook(#[from] HandbookError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("bundle file line {line}: {message}")]
    BundleFile { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Reward at or above which a trajectory counts as a success.
    pub success_threshold: f64,
    /// Diffs whose gap tokens overlap at least this much share a cluster.
    pub cluster_jaccard: f64,
    /// Proposals overlapping an existing skill at least this much are dropped.
    pub dedup_jaccard: f64,
    pub attribution: Attribution,
    pub retrieval_k: usize,
    pub retrieval_threshold: f64,
    pub insights: InsightConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            success_threshold: 0.5,
            cluster_jaccard: 0.5,
            dedup_jaccard: 0.6,
            attribution: Attribution::Trajectory,
            retrieval_k: 3,
            retrieval_threshold: 0.05,
            insights: InsightConfig::default(),
        }
    }
}

impl LearnerConfig {
    pub fn judge(&self) -> JudgeConfig {
        JudgeConfig {
            attribution: self.attribution,
            success_threshold: self.success_threshold,
            retrieval_k: self.retrieval_k,
            retrieval_threshold: self.retrieval_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearnReport {
    pub diffs: usize,
    pub clusters: usize,
    pub proposals: Vec<SkillProposal>,
    pub proposer_failures: Vec<String>,
    pub insights_added: usize,
    pub outcomes: usize,
}

/// Full discovery stage: diff every bundle at every mode, propose and insert
/// skills, rebuild profiles, distill insights. The result is exactly one
/// version above the input.
pub fn learn(
    handbook: &Handbook,
    bundles: &[TrajectoryBundle],
    proposer: &dyn SkillProposer,
    config: &LearnerConfig,
) -> Result<(Handbook, LearnReport), LearnError> {
    let mut diffs = Vec::new();
    for b in bundles {
        for m in &handbook.modes {
            diffs.extend(diff_trajectories(b, &m.mode, config.success_threshold));
        }
    }
    let run = propose_skills(&diffs, proposer, handbook, config);
    let with_skills = propose::insert_proposals(handbook, &run.proposals)?;
    let (with_profiles, outcomes) = profiles::build_profiles_inner(&with_skills, bundles, &config.judge())?;
    let (mut learned, added) =
        insights::distill_inner(bundles, &with_profiles, proposer, &config.insights, config.success_threshold);

    learned.version = handbook.version;
    let learned = learned.next_version(&format!(
        "learn: {} diffs, {} skills proposed by {}",
        diffs.len(),
        run.proposals.len(),
        proposer.name()
    ));
    Ok((
        learned,
        LearnReport {
            diffs: diffs.len(),
            clusters: run.clusters,
            proposals: run.proposals,
            proposer_failures: run.failures,
            insights_added: added,
            outcomes,
        },
    ))
}

// ── Bundle files ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecord {
    pub query: Query,
    /// Trajectory log, relative to the bundle file's directory.
    pub trajectory_log: String,
    pub trajectory_ids: Vec<String>,
}

/// Writes `<dir>/trajectories.jsonl` and `<dir>/bundles.jsonl`.
pub fn save_bundles(dir: &Path, bundles: &[TrajectoryBundle]) -> Result<(), LearnError> {
    fs::create_dir_all(dir).map_err(|e| LearnError::Log(LogError::Io(e)))?;
    let all: Vec<Trajectory> = bundles.iter().flat_map(|b| b.trajectories.clone()).collect();
    save_jsonl(&dir.join("trajectories.jsonl"), &all).map_err(|e| LearnError::Log(LogError::Io(e)))?;
    let mut out = String::new();
    for b in bundles {
        let rec = BundleRecord {
            query: b.query.clone(),
            trajectory_log: "trajectories.jsonl".into(),
            trajectory_ids: b.trajectories.iter().map(|t| t.id.clone()).collect(),
        };
        out.push_str(&crate::trajectory::to_json_line(&rec));
        out.push('\n');
    }
    fs::write(dir.join("bundles.jsonl"), out).map_err(|e| LearnError::Log(LogError::Io(e)))?;
    Ok(())
}

pub fn load_bundles(path: &Path) -> Result<Vec<TrajectoryBundle>, LearnError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let f = fs::File::open(path).map_err(|e| LearnError::Log(LogError::Io(e)))?;
    let mut logs: std::collections::BTreeMap<String, std::collections::BTreeMap<String, Trajectory>> =
        Default::default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LearnError::Log(LogError::Io(e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BundleRecord = serde_json::from_str(&line).map_err(|e| LearnError::BundleFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !logs.contains_key(&rec.trajectory_log) {
            let ts = load_jsonl(&dir.join(&rec.trajectory_log))?;
            logs.insert(
                rec.trajectory_log.clone(),
                ts.into_iter().map(|t| (t.id.clone(), t)).collect(),
            );
        }
        let log = &logs[&rec.trajectory_log];
        let trajectories = rec
            .trajectory_ids
            .iter()
            .map(|id| {
                log.get(id).cloned().ok_or_else(|| LearnError::BundleFile {
                    line: i + 1,
                    message: format!("trajectory `{id}` not found in {}", rec.trajectory_log),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TrajectoryBundle {
            query: rec.query,
            trajectories,
        });
    }
    Ok(out)
}
