//! Episode records, the environment contract, and the JSONL trajectory log.
//!
//! A log file holds any number of trajectories. Each step is one `"kind":
//! "step"` line; a trajectory is closed by one `"kind": "end"` line carrying
//! the query, the terminal reward and the total cost.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{sort_keys, AgentId, ModeId, SkillId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub mode: ModeId,
    pub agent: AgentId,
    pub trace_digest: String,
    pub observation_digest: String,
}

/// s_t: the query plus everything that happened so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionState {
    pub query: Query,
    pub history: Vec<HistoryEntry>,
    pub turn: usize,
}

impl InteractionState {
    pub fn new(query: Query) -> Self {
        Self {
            query,
            history: Vec::new(),
            turn: 0,
        }
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        self.history.push(entry);
        self.turn = self.history.len();
    }

    /// Query text followed by every trace and observation digest.
    pub fn retrieval_text(&self) -> String {
        let mut text = self.query.text.clone();
        for h in &self.history {
            text.push(' ');
            text.push_str(&h.trace_digest);
            text.push(' ');
            text.push_str(&h.observation_digest);
        }
        text
    }

    pub fn has_visited(&self, mode: &str) -> bool {
        self.history.iter().any(|h| h.mode == mode)
    }
}

// ── Environment contract ────────────────────────────────────────────────

/// What an agent call produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub trace: String,
    pub observation: String,
    /// Absent when the backend gives no success signal.
    pub success: Option<bool>,
    /// Normalized cost units.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionErrorKind {
    Timeout,
    Transport,
    MalformedResponse,
    UnknownAgent,
    UnknownMode,
    Other,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {message}")]
pub struct ExecutionError {
    pub kind: ExecutionErrorKind,
    pub message: String,
    /// Cost charged for the failed attempt.
    pub penalty_cost: f64,
}

pub trait Environment {
    fn execute(
        &mut self,
        agent: &str,
        mode: &str,
        state: &InteractionState,
    ) -> Result<Execution, ExecutionError>;

    /// Terminal reward in [0, 1].
    fn judge(&mut self, query: &Query, steps: &[Step]) -> f64;
}

/// Builds one independent environment per episode.
pub trait EnvironmentFactory: Sync {
    /// Orchestrator / backend tag recorded in reports.
    fn tag(&self) -> String;

    fn episode(&self, query: &Query, seed: u64) -> Result<Box<dyn Environment + '_>, ExecutionError>;
}

// ── Records ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub turn: usize,
    pub mode: ModeId,
    pub agent: AgentId,
    pub active_skills: BTreeMap<SkillId, f64>,
    pub utilities: BTreeMap<AgentId, f64>,
    pub cost: f64,
    pub trace_digest: String,
    pub observation_digest: String,
    pub success: Option<bool>,
    #[serde(default)]
    pub error: Option<ExecutionError>,
    #[serde(default)]
    pub tie_break: Option<String>,
    #[serde(default)]
    pub unprofiled: Vec<AgentId>,
    pub lambda_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub query: Query,
    pub policy: String,
    pub handbook_version: u64,
    pub steps: Vec<Step>,
    pub reward: f64,
    pub total_cost: f64,
}

impl Trajectory {
    /// R(τ) − λ·ΣC.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.reward - lambda * self.total_cost
    }

    pub fn history_before(&self, turn: usize) -> InteractionState {
        let mut s = InteractionState::new(self.query.clone());
        for step in self.steps.iter().take(turn) {
            s.push(HistoryEntry {
                mode: step.mode.clone(),
                agent: step.agent.clone(),
                trace_digest: step.trace_digest.clone(),
                observation_digest: step.observation_digest.clone(),
            });
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        trajectory: String,
        #[serde(flatten)]
        step: Step,
    },
    End {
        trajectory: String,
        query: Query,
        policy: String,
        handbook_version: u64,
        steps: usize,
        reward: f64,
        total_cost: f64,
    },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
}

pub fn records(t: &Trajectory) -> Vec<LogRecord> {
    let mut out: Vec<LogRecord> = t
        .steps
        .iter()
        .map(|s| LogRecord::Step {
            trajectory: t.id.clone(),
            step: s.clone(),
        })
        .collect();
    out.push(LogRecord::End {
        trajectory: t.id.clone(),
        query: t.query.clone(),
        policy: t.policy.clone(),
        handbook_version: t.handbook_version,
        steps: t.steps.len(),
        reward: t.reward,
        total_cost: t.total_cost,
    });
    out
}

/// One canonical JSON line (sorted keys, no trailing newline).
pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("record serializes");
    serde_json::to_string(&sort_keys(v)).expect("value serializes")
}

pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory]) -> io::Result<()> {
    for t in trajectories {
        for r in records(t) {
            writeln!(w, "{}", to_json_line(&r))?;
        }
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, trajectories: &[Trajectory]) -> io::Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, trajectories)?;
    fs::write(path, buf)
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>, LogError> {
    let mut out = Vec::new();
    let mut open: Option<(String, Vec<Step>)> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match rec {
            LogRecord::Step { trajectory, step } => match &mut open {
                Some((id, steps)) if *id == trajectory => steps.push(step),
                Some((id, _)) => {
                    return Err(LogError::Structure {
                        line: lineno,
                        message: format!("step for `{trajectory}` while `{id}` is open"),
                    })
                }
                None => open = Some((trajectory, vec![step])),
            },
            LogRecord::End {
                trajectory,
                query,
                policy,
                handbook_version,
                steps: n,
                reward,
                total_cost,
            } => {
                let steps = match open.take() {
                    Some((id, steps)) if id == trajectory => steps,
                    Some((id, _)) => {
                        return Err(LogError::Structure {
                            line: lineno,
                            message: format!("end for `{trajectory}` while `{id}` is open"),
                        })
                    }
                    None => Vec::new(),
                };
                if steps.len() != n {
                    return Err(LogError::Structure {
                        line: lineno,
                        message: format!("`{trajectory}` declares {n} steps, found {}", steps.len()),
                    });
                }
                out.push(Trajectory {
                    id: trajectory,
                    query,
                    policy,
                    handbook_version,
                    steps,
                    reward,
                    total_cost,
                });
            }
        }
    }
    if let Some((id, _)) = open {
        return Err(LogError::Structure {
            line: 0,
            message: format!("trajectory `{id}` has no end record"),
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Trajectory>, LogError> {
    let f = fs::File::open(path)?;
    read_jsonl(io::BufReader::new(f))
}
