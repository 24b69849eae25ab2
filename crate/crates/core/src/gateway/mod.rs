//! HTTP adapters: agent execution and external policy services.
//!
//! Agents are reached through [`call_agent`], which posts the documented
//! request JSON and maps the reply onto the [`Environment`] contract.
//! Everything network-facing goes through the [`Transport`] trait, so tests
//! swap in [`FnTransport`] without a server.
//!
//! Wire format of an agent call:
//!
//! ```text
//! request  {"request_id", "agent_id", "mode", "query": {id, text, tags},
//!           "history": [{mode, agent, trace_digest, observation_digest}], "turn"}
//! response {"trace", "observation", "cost", "success"?}
//! ```
//!
//! `cost` is raw (currency or tokens) and is divided by the endpoint's
//! reference cost; `success` may be omitted.

mod external;

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{AgentId, ModeId};
use crate::text::derive_seed;
use crate::trajectory::{
    Environment, EnvironmentFactory, Execution, ExecutionError, ExecutionErrorKind, HistoryEntry,
    InteractionState, Query, Step,
};

pub use external::{
    call_service, ExternalJudge, ExternalModePolicy, ExternalProposer, ExternalReviewer, FallbackLog, ServiceEndpoint,
    ServiceError, ServiceRole,
};

// ── Transport ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// A single JSON POST.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &str, timeout: Duration, bearer: Option<&str>) -> Result<String, TransportError>;
}

/// Real HTTP via `ureq`. Non-2xx statuses are transport failures.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self {
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &str, timeout: Duration, bearer: Option<&str>) -> Result<String, TransportError> {
        let mut req = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("content-type", "application/json");
        if let Some(token) = bearer {
            req = req.header("authorization", &format!("Bearer {token}"));
        }
        let map = |e: ureq::Error| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout(io.to_string()),
            other => TransportError::Transport(other.to_string()),
        };
        let mut resp = req.send(body).map_err(map)?;
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| TransportError::Transport(e.to_string()))?;
        Ok(text)
    }
}

type PostFn = dyn Fn(&str, &str) -> Result<String, TransportError> + Send + Sync;

/// Transport backed by a closure of `(url, body)`; used for mocks.
#[derive(Clone)]
pub struct FnTransport {
    f: Arc<PostFn>,
}

impl FnTransport {
    pub fn new(f: impl Fn(&str, &str) -> Result<String, TransportError> + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }
}

impl Transport for FnTransport {
    fn post(&self, url: &str, body: &str, _timeout: Duration, _bearer: Option<&str>) -> Result<String, TransportError> {
        (self.f)(url, body)
    }
}

/// Bearer token from the named environment variable, if one is configured.
pub(crate) fn bearer(auth_env: &Option<String>) -> Result<Option<String>, TransportError> {
    match auth_env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| TransportError::Transport(format!("auth variable `{var}` is not set"))),
    }
}

/// Counting semaphore for the per-endpoint concurrency limit.
#[derive(Debug)]
struct Limit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl Limit {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut used = self.used.lock().expect("limit lock");
        while *used >= self.max {
            used = self.freed.wait(used).expect("limit lock");
        }
        *used += 1;
        drop(used);
        let out = f();
        *self.used.lock().expect("limit lock") -= 1;
        self.freed.notify_one();
        out
    }
}

// ── Agent calls ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEndpoint {
    pub agent_id: AgentId,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    /// Raw cost of one typical call; reported costs are divided by it.
    pub reference_cost: f64,
    pub modes: Vec<ModeId>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EndpointError {
    #[error("endpoint `{0}`: timeout must be positive")]
    Timeout(AgentId),
    #[error("endpoint `{0}`: reference cost must be positive")]
    ReferenceCost(AgentId),
    #[error("duplicate endpoint for `{0}`")]
    Duplicate(AgentId),
}

impl AgentEndpoint {
    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.timeout_ms == 0 {
            return Err(EndpointError::Timeout(self.agent_id.clone()));
        }
        if !(self.reference_cost.is_finite() && self.reference_cost > 0.0) {
            return Err(EndpointError::ReferenceCost(self.agent_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCallRequest {
    pub request_id: String,
    pub agent_id: AgentId,
    pub mode: ModeId,
    pub query: Query,
    pub history: Vec<HistoryEntry>,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCallResponse {
    pub trace: String,
    pub observation: String,
    pub cost: f64,
    #[serde(default)]
    pub success: Option<bool>,
}

/// One agent call. `penalty_cost` (normalized) is charged when the call
/// fails; `None` charges one reference cost, i.e. 1.0.
pub fn call_agent(
    endpoint: &AgentEndpoint,
    transport: &dyn Transport,
    mode: &str,
    state: &InteractionState,
    request_id: &str,
    penalty_cost: Option<f64>,
) -> Result<Execution, ExecutionError> {
    let penalty = penalty_cost.unwrap_or(1.0);
    let fail = |kind, message: String| ExecutionError { kind, message, penalty_cost: penalty };
    if !endpoint.modes.iter().any(|m| m == mode) {
        return Err(fail(
            ExecutionErrorKind::UnknownMode,
            format!("`{}` does not serve mode `{mode}`", endpoint.agent_id),
        ));
    }
    let req = AgentCallRequest {
        request_id: request_id.to_string(),
        agent_id: endpoint.agent_id.clone(),
        mode: mode.to_string(),
        query: state.query.clone(),
        history: state.history.clone(),
        turn: state.turn,
    };
    let body = serde_json::to_string(&req).expect("request serializes");
    let token = bearer(&endpoint.auth_env).map_err(|e| fail(ExecutionErrorKind::Transport, e.to_string()))?;
    let text = transport
        .post(&endpoint.base_url, &body, Duration::from_millis(endpoint.timeout_ms), token.as_deref())
        .map_err(|e| match e {
            TransportError::Timeout(m) => fail(ExecutionErrorKind::Timeout, m),
            TransportError::Transport(m) => fail(ExecutionErrorKind::Transport, m),
        })?;
    let resp: AgentCallResponse = serde_json::from_str(&text)
        .map_err(|e| fail(ExecutionErrorKind::MalformedResponse, e.to_string()))?;
    if !(resp.cost.is_finite() && resp.cost >= 0.0) {
        return Err(fail(
            ExecutionErrorKind::MalformedResponse,
            format!("cost must be finite and non-negative, got {}", resp.cost),
        ));
    }
    Ok(Execution {
        trace: resp.trace,
        observation: resp.observation,
        success: resp.success,
        cost: resp.cost / endpoint.reference_cost,
    })
}

// ── Environment ─────────────────────────────────────────────────────────

type JudgeFn = dyn Fn(&Query, &[Step]) -> f64 + Send + Sync;

/// Episodes whose agent calls go to HTTP endpoints.
///
/// Without a judge, a trajectory earns 1 when it has steps and every step
/// reported success, else 0; steps without a success signal count as
/// failures, so a judge service or labels are required for backends that
/// omit it.
pub struct GatewayEnvironment {
    endpoints: BTreeMap<AgentId, (AgentEndpoint, Limit)>,
    transport: Arc<dyn Transport>,
    penalty_cost: Option<f64>,
    judge: Option<Arc<JudgeFn>>,
    tag: String,
}

impl GatewayEnvironment {
    pub fn new(
        endpoints: Vec<AgentEndpoint>,
        transport: Arc<dyn Transport>,
        penalty_cost: Option<f64>,
    ) -> Result<Self, EndpointError> {
        let mut map = BTreeMap::new();
        for e in endpoints {
            e.validate()?;
            let limit = Limit::new(e.max_concurrency);
            if map.insert(e.agent_id.clone(), (e.clone(), limit)).is_some() {
                return Err(EndpointError::Duplicate(e.agent_id));
            }
        }
        Ok(Self { endpoints: map, transport, penalty_cost, judge: None, tag: "gateway".into() })
    }

    pub fn with_judge(mut self, judge: impl Fn(&Query, &[Step]) -> f64 + Send + Sync + 'static) -> Self {
        self.judge = Some(Arc::new(judge));
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }
}

pub fn default_judge(steps: &[Step]) -> f64 {
    if !steps.is_empty() && steps.iter().all(|s| s.success == Some(true)) {
        1.0
    } else {
        0.0
    }
}

impl EnvironmentFactory for GatewayEnvironment {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn episode(&self, query: &Query, seed: u64) -> Result<Box<dyn Environment + '_>, ExecutionError> {
        Ok(Box::new(GatewayEpisode {
            env: self,
            seed: derive_seed(&["gateway", &seed.to_string(), &query.id]),
        }))
    }
}

struct GatewayEpisode<'g> {
    env: &'g GatewayEnvironment,
    seed: u64,
}

impl Environment for GatewayEpisode<'_> {
    fn execute(&mut self, agent: &str, mode: &str, state: &InteractionState) -> Result<Execution, ExecutionError> {
        let Some((endpoint, limit)) = self.env.endpoints.get(agent) else {
            return Err(ExecutionError {
                kind: ExecutionErrorKind::UnknownAgent,
                message: format!("no endpoint for agent `{agent}`"),
                penalty_cost: self.env.penalty_cost.unwrap_or(0.0),
            });
        };
        // Stable per (episode, turn) so a retried request is recognizable.
        let request_id = format!("{:016x}-{}", self.seed, state.turn);
        limit.run(|| call_agent(endpoint, self.env.transport.as_ref(), mode, state, &request_id, self.env.penalty_cost))
    }

    fn judge(&mut self, query: &Query, steps: &[Step]) -> f64 {
        match &self.env.judge {
            Some(j) => j(query, steps),
            None => default_judge(steps),
        }
    }
}
