//! External policy services: mode policy, skill proposer, refinement
//! reviewer and trajectory judge.
//!
//! Every request is `{"role", "payload"}`; responses are validated against
//! the same types the built-in implementations produce. A call that still
//! fails after its retry budget falls back to the built-in implementation,
//! and the fallback is written to the log and to a [`FallbackLog`].

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{bearer, default_judge, Transport, TransportError};
use crate::handbook::{Handbook, ModeId, ModeMetadata, Skill};
use crate::learner::{DiffCluster, InsightPattern, ProposerError, SkillProposer};
use crate::refiner::{RefinementCandidate, Reviewer, ReviewerError, Verdict};
use crate::router::{ModePolicy, PolicyError};
use crate::trajectory::{HistoryEntry, InteractionState, Query, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceRole {
    ModePolicy,
    Proposer,
    Reviewer,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceEndpoint {
    pub url: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    /// Extra attempts after the first.
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_retries() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("{role:?} service unreachable: {message}")]
    Transport { role: ServiceRole, message: String },
    #[error("{role:?} response rejected: {message}")]
    Schema { role: ServiceRole, message: String },
}

#[derive(Serialize)]
struct Envelope<'a, P: Serialize> {
    role: ServiceRole,
    payload: &'a P,
}

/// POSTs `payload` and parses the reply into `R`, retrying transport
/// failures and schema rejections alike. `check` adds semantic validation
/// beyond the type.
pub fn call_service<P: Serialize, R: DeserializeOwned>(
    endpoint: &ServiceEndpoint,
    transport: &dyn Transport,
    role: ServiceRole,
    payload: &P,
    check: impl Fn(&R) -> Result<(), String>,
) -> Result<R, ServiceError> {
    let body = serde_json::to_string(&Envelope { role, payload }).expect("payload serializes");
    let mut last = None;
    for _ in 0..=endpoint.retries {
        let token = bearer(&endpoint.auth_env).map_err(|e| ServiceError::Transport { role, message: e.to_string() })?;
        let outcome = match transport.post(&endpoint.url, &body, Duration::from_millis(endpoint.timeout_ms), token.as_deref()) {
            Err(TransportError::Timeout(m) | TransportError::Transport(m)) => Err(ServiceError::Transport { role, message: m }),
            Ok(text) => serde_json::from_str::<R>(&text)
                .map_err(|e| e.to_string())
                .and_then(|r| check(&r).map(|_| r))
                .map_err(|message| ServiceError::Schema { role, message }),
        };
        match outcome {
            Ok(r) => return Ok(r),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Shared record of every fallback to a built-in implementation.
#[derive(Debug, Clone, Default)]
pub struct FallbackLog(Arc<Mutex<Vec<String>>>);

impl FallbackLog {
    pub fn record(&self, role: ServiceRole, err: &ServiceError) {
        let line = format!("{role:?} fell back to built-in: {err}");
        log::warn!("{line}");
        self.0.lock().expect("fallback log").push(line);
    }

    pub fn entries(&self) -> Vec<String> {
        self.0.lock().expect("fallback log").clone()
    }
}

pub struct External<T> {
    pub endpoint: ServiceEndpoint,
    pub transport: Arc<dyn Transport>,
    pub fallback: T,
    pub log: FallbackLog,
}

// ── Mode policy ─────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ModePolicyPayload<'a> {
    query: &'a Query,
    history: &'a [HistoryEntry],
    turn: usize,
    max_turns: usize,
    modes: &'a [ModeMetadata],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeReply {
    mode: ModeId,
}

pub type ExternalModePolicy = External<Box<dyn ModePolicy>>;

impl ModePolicy for ExternalModePolicy {
    fn name(&self) -> String {
        format!("external({})", self.fallback.name())
    }

    fn choose(&self, state: &InteractionState, handbook: &Handbook, max_turns: usize) -> Result<ModeId, PolicyError> {
        let payload = ModePolicyPayload {
            query: &state.query,
            history: &state.history,
            turn: state.turn,
            max_turns,
            modes: &handbook.modes,
        };
        let check = |r: &ModeReply| {
            handbook
                .mode(&r.mode)
                .map(|_| ())
                .ok_or_else(|| format!("unknown mode `{}`", r.mode))
        };
        match call_service(&self.endpoint, self.transport.as_ref(), ServiceRole::ModePolicy, &payload, check) {
            Ok(r) => Ok(r.mode),
            Err(e) => {
                self.log.record(ServiceRole::ModePolicy, &e);
                self.fallback.choose(state, handbook, max_turns)
            }
        }
    }
}

// ── Proposer ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ProposerPayload<'a> {
    cluster: &'a DiffCluster,
    existing_skills: Vec<&'a Skill>,
}

pub type ExternalProposer = External<Box<dyn SkillProposer>>;

fn check_skill(s: &Skill, cluster: &DiffCluster, h: &Handbook) -> Result<(), String> {
    if s.id.trim().is_empty() {
        return Err("empty skill id".into());
    }
    if s.mode != cluster.mode {
        return Err(format!("skill mode `{}` differs from cluster mode `{}`", s.mode, cluster.mode));
    }
    if s.indicators.is_empty() {
        return Err("skill has no indicators".into());
    }
    if let Some(p) = &s.parent {
        if h.skill(p).is_none() {
            return Err(format!("unknown parent `{p}`"));
        }
    }
    Ok(())
}

impl SkillProposer for ExternalProposer {
    fn name(&self) -> String {
        format!("external({})", self.fallback.name())
    }

    fn propose(&self, cluster: &DiffCluster, handbook: &Handbook) -> Result<Skill, ProposerError> {
        let payload = ProposerPayload {
            cluster,
            existing_skills: handbook.skills.iter().filter(|s| s.mode == cluster.mode).collect(),
        };
        let check = |s: &Skill| check_skill(s, cluster, handbook);
        match call_service(&self.endpoint, self.transport.as_ref(), ServiceRole::Proposer, &payload, check) {
            Ok(s) => Ok(s),
            Err(e) => {
                self.log.record(ServiceRole::Proposer, &e);
                self.fallback.propose(cluster, handbook)
            }
        }
    }

    fn phrase_insight(&self, pattern: &InsightPattern) -> String {
        self.fallback.phrase_insight(pattern)
    }
}

// ── Reviewer ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ReviewerPayload<'a> {
    candidate: &'a RefinementCandidate,
    skills: Vec<&'a Skill>,
}

pub type ExternalReviewer = External<Box<dyn Reviewer>>;

impl Reviewer for ExternalReviewer {
    fn name(&self) -> String {
        format!("external({})", self.fallback.name())
    }

    fn review(&self, candidate: &RefinementCandidate, handbook: &Handbook) -> Result<Verdict, ReviewerError> {
        let payload = ReviewerPayload {
            candidate,
            skills: candidate.targets.iter().filter_map(|t| handbook.skill(t)).collect(),
        };
        let check = |v: &Verdict| match v {
            Verdict::Revise { candidate: c } if c.kind != candidate.kind => {
                Err("revision changes the candidate kind".to_string())
            }
            _ => Ok(()),
        };
        match call_service(&self.endpoint, self.transport.as_ref(), ServiceRole::Reviewer, &payload, check) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.log.record(ServiceRole::Reviewer, &e);
                self.fallback.review(candidate, handbook)
            }
        }
    }
}

// ── Judge ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct JudgePayload<'a> {
    query: &'a Query,
    steps: &'a [Step],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeReply {
    reward: f64,
}

/// Judge service with the all-steps-succeeded rule as fallback.
pub struct ExternalJudge {
    pub endpoint: ServiceEndpoint,
    pub transport: Arc<dyn Transport>,
    pub log: FallbackLog,
}

impl ExternalJudge {
    pub fn judge(&self, query: &Query, steps: &[Step]) -> f64 {
        let check = |r: &JudgeReply| {
            if (0.0..=1.0).contains(&r.reward) {
                Ok(())
            } else {
                Err(format!("reward {} outside [0, 1]", r.reward))
            }
        };
        match call_service(&self.endpoint, self.transport.as_ref(), ServiceRole::Judge, &JudgePayload { query, steps }, check) {
            Ok(r) => r.reward,
            Err(e) => {
                self.log.record(ServiceRole::Judge, &e);
                default_judge(steps)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FnTransport;
    use crate::learner::BaselineProposer;
    use crate::refiner::{AutoApprove, CandidateKind};
    use crate::router::RulePolicy;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn endpoint() -> ServiceEndpoint {
        ServiceEndpoint { url: "mock".into(), auth_env: None, timeout_ms: 100, retries: 2 }
    }

    fn hb() -> Handbook {
        let mut h = Handbook::default();
        for m in ["search", "answer"] {
            h.modes.push(ModeMetadata { mode: m.into(), insights: vec![], allowed_agents: vec!["a".into()] });
        }
        h
    }

    fn state() -> InteractionState {
        InteractionState::new(Query { id: "q".into(), text: "x".into(), tags: vec![] })
    }

    fn policy(reply: &'static str, log: &FallbackLog) -> ExternalModePolicy {
        External {
            endpoint: endpoint(),
            transport: Arc::new(FnTransport::new(move |_, _| Ok(reply.into()))),
            fallback: Box::new(RulePolicy::needs_table("rules", &["search"])),
            log: log.clone(),
        }
    }

    #[test]
    fn mode_policy_passthrough() {
        let log = FallbackLog::default();
        assert_eq!(policy(r#"{"mode":"search"}"#, &log).choose(&state(), &hb(), 4).unwrap(), "search");
        assert!(log.entries().is_empty());
    }

    #[test]
    fn unknown_mode_falls_back_and_is_logged() {
        let log = FallbackLog::default();
        // The rule table picks `answer` because the query has no tags.
        assert_eq!(policy(r#"{"mode":"dance"}"#, &log).choose(&state(), &hb(), 4).unwrap(), "answer");
        assert_eq!(log.entries().len(), 1);
    }

    #[test]
    fn retries_until_budget_then_errors() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let t = FnTransport::new(move |_, _| {
            c2.fetch_add(1, Ordering::SeqCst);
            Ok("{}".into())
        });
        let r: Result<ModeReply, _> = call_service(&endpoint(), &t, ServiceRole::ModePolicy, &1, |_| Ok(()));
        assert!(matches!(r, Err(ServiceError::Schema { .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn proposal_missing_indicators_is_rejected() {
        let t = FnTransport::new(|_, _| Ok(r#"{"id":"s","description":"d","mode":"search"}"#.into()));
        let cluster = DiffCluster { mode: "search".into(), diffs: vec![], tokens: Default::default() };
        let h = hb();
        let r: Result<Skill, _> = call_service(&endpoint(), &t, ServiceRole::Proposer, &1, |s| check_skill(s, &cluster, &h));
        match r {
            Err(ServiceError::Schema { message, .. }) => assert!(message.contains("indicators")),
            other => panic!("unexpected {other:?}"),
        }
        let log = FallbackLog::default();
        let p = External {
            endpoint: endpoint(),
            transport: Arc::new(t) as Arc<dyn Transport>,
            fallback: Box::new(BaselineProposer::new()) as Box<dyn SkillProposer>,
            log: log.clone(),
        };
        // The baseline has no tokens to work with either, so it errors too.
        assert!(p.propose(&cluster, &h).is_err());
        assert_eq!(log.entries().len(), 1);
    }

    #[test]
    fn reviewer_approval_passes_through() {
        let r = External {
            endpoint: endpoint(),
            transport: Arc::new(FnTransport::new(|_, body| {
                assert!(body.contains("\"role\":\"reviewer\""));
                Ok(r#"{"decision":"approve"}"#.into())
            })) as Arc<dyn Transport>,
            fallback: Box::new(AutoApprove) as Box<dyn Reviewer>,
            log: FallbackLog::default(),
        };
        let c = RefinementCandidate {
            kind: CandidateKind::Merge,
            targets: vec![],
            statistic: 0.0,
            evidence: Default::default(),
            clusters: vec![],
        };
        assert_eq!(r.review(&c, &hb()).unwrap(), Verdict::Approve);
    }

    #[test]
    fn judge_rejects_out_of_range() {
        let j = ExternalJudge {
            endpoint: ServiceEndpoint { retries: 0, ..endpoint() },
            transport: Arc::new(FnTransport::new(|_, _| Ok(r#"{"reward":1.5}"#.into()))),
            log: FallbackLog::default(),
        };
        let q = Query { id: "q".into(), text: String::new(), tags: vec![] };
        assert_eq!(j.judge(&q, &[]), 0.0);
        assert_eq!(j.log.entries().len(), 1);
    }
}
