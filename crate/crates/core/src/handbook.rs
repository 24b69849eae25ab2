//! The skill handbook: mode metadata, skill registry, agent profiles and the
//! mode→skill index, together with validation and canonical JSON storage.
//!
//! A handbook is a value. Pipeline stages never mutate one in place; they
//! return a new handbook whose `version` is one higher.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ModeId = String;
pub type SkillId = String;
pub type AgentId = String;

/// Uniform Beta(1,1) prior used for every fresh counter.
pub const PRIOR_ALPHA: f64 = 1.0;
pub const PRIOR_BETA: f64 = 1.0;

// ── Types ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub id: SkillId,
    pub description: String,
    pub indicators: Vec<String>,
    #[serde(default)]
    pub parent: Option<SkillId>,
    pub mode: ModeId,
}

impl Skill {
    /// Text used for similarity matching: indicators followed by description.
    pub fn match_text(&self) -> String {
        let mut text = self.indicators.join(" ");
        text.push(' ');
        text.push_str(&self.description);
        text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeMetadata {
    pub mode: ModeId,
    pub insights: Vec<String>,
    pub allowed_agents: Vec<AgentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaCounter {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaCounter {
    pub const PRIOR: BetaCounter = BetaCounter {
        alpha: PRIOR_ALPHA,
        beta: PRIOR_BETA,
    };

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Observed successes (alpha above the prior).
    pub fn successes(&self) -> f64 {
        self.alpha - PRIOR_ALPHA
    }

    /// Observed failures (beta above the prior).
    pub fn failures(&self) -> f64 {
        self.beta - PRIOR_BETA
    }

    pub fn observations(&self) -> f64 {
        self.successes() + self.failures()
    }
}

impl Default for BetaCounter {
    fn default() -> Self {
        Self::PRIOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostStats {
    /// Mean per-call cost in normalized cost units.
    pub mean: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub mode: ModeId,
    pub counters: BTreeMap<SkillId, BetaCounter>,
    pub cost: CostStats,
    pub routing_signals: Vec<String>,
    pub summary: String,
}

impl AgentProfile {
    pub fn new(agent_id: impl Into<AgentId>, mode: impl Into<ModeId>) -> Self {
        Self {
            agent_id: agent_id.into(),
            mode: mode.into(),
            counters: BTreeMap::new(),
            cost: CostStats::default(),
            routing_signals: Vec::new(),
            summary: String::new(),
        }
    }

    /// Counter for `skill`, or the prior when the profile has no entry.
    pub fn counter(&self, skill: &str) -> BetaCounter {
        self.counters.get(skill).copied().unwrap_or(BetaCounter::PRIOR)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Handbook {
    pub version: u64,
    pub provenance: String,
    pub modes: Vec<ModeMetadata>,
    pub skills: Vec<Skill>,
    pub profiles: Vec<AgentProfile>,
    /// Mode → skill ids, in registry order.
    pub edges: BTreeMap<ModeId, Vec<SkillId>>,
}

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum HandbookError {
    #[error("unknown mode `{0}`")]
    UnknownMode(ModeId),

    #[error("schema violation at {path} (line {line}, column {column}, byte {offset}): {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },

    #[error("refusing to save invalid handbook: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ── Accessors ───────────────────────────────────────────────────────────

impl Handbook {
    pub fn mode(&self, mode: &str) -> Option<&ModeMetadata> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn mode_mut(&mut self, mode: &str) -> Option<&mut ModeMetadata> {
        self.modes.iter_mut().find(|m| m.mode == mode)
    }

    pub fn skill(&self, id: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn profile(&self, agent: &str, mode: &str) -> Option<&AgentProfile> {
        self.profiles
            .iter()
            .find(|p| p.agent_id == agent && p.mode == mode)
    }

    pub fn profile_mut(&mut self, agent: &str, mode: &str) -> Option<&mut AgentProfile> {
        self.profiles
            .iter_mut()
            .find(|p| p.agent_id == agent && p.mode == mode)
    }

    /// Returns the profile for `(agent, mode)`, creating an empty one if absent.
    pub fn profile_entry(&mut self, agent: &str, mode: &str) -> &mut AgentProfile {
        let idx = match self
            .profiles
            .iter()
            .position(|p| p.agent_id == agent && p.mode == mode)
        {
            Some(i) => i,
            None => {
                self.profiles.push(AgentProfile::new(agent, mode));
                self.profiles.len() - 1
            }
        };
        &mut self.profiles[idx]
    }

    pub fn children(&self, skill: &str) -> Vec<&Skill> {
        self.skills
            .iter()
            .filter(|s| s.parent.as_deref() == Some(skill))
            .collect()
    }

    /// The mode–skill index lookup M(ψ), in edge order.
    pub fn mode_skills(&self, mode: &str) -> Result<Vec<&Skill>, HandbookError> {
        if self.mode(mode).is_none() {
            return Err(HandbookError::UnknownMode(mode.to_string()));
        }
        Ok(self
            .edges
            .get(mode)
            .map(|ids| {
                ids.iter()
                    .filter_map(|id| self.skill(id))
                    .filter(|s| s.mode == mode)
                    .collect()
            })
            .unwrap_or_default())
    }

    /// Copy with `version + 1` and a provenance line appended.
    pub fn next_version(&self, note: &str) -> Handbook {
        let mut next = self.clone();
        next.version += 1;
        if next.provenance.is_empty() {
            next.provenance = format!("v{}: {}", next.version, note);
        } else {
            next.provenance = format!("{}\nv{}: {}", next.provenance, next.version, note);
        }
        next
    }

    /// Adds `skill` to the registry and the mode's edge list.
    pub(crate) fn insert_skill(&mut self, skill: Skill) {
        self.edges
            .entry(skill.mode.clone())
            .or_default()
            .push(skill.id.clone());
        self.skills.push(skill);
    }

    /// Removes a skill, its edge, and every profile counter for it.
    pub(crate) fn remove_skill(&mut self, id: &str) {
        self.skills.retain(|s| s.id != id);
        for ids in self.edges.values_mut() {
            ids.retain(|s| s != id);
        }
        for p in &mut self.profiles {
            p.counters.remove(id);
        }
    }
}

// ── Validation ──────────────────────────────────────────────────────────

/// Checks every structural invariant. Violations are returned as data.
pub fn validate(h: &Handbook) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    let mut mode_ids = BTreeSet::new();
    for (i, m) in h.modes.iter().enumerate() {
        if !mode_ids.insert(m.mode.as_str()) {
            push(format!("modes[{i}].mode"), format!("duplicate mode `{}`", m.mode));
        }
    }

    let mut skill_ids = BTreeSet::new();
    for (i, s) in h.skills.iter().enumerate() {
        if !skill_ids.insert(s.id.as_str()) {
            push(format!("skills[{i}].id"), format!("duplicate skill id `{}`", s.id));
        }
        if !mode_ids.contains(s.mode.as_str()) {
            push(
                format!("skills[{i}].mode"),
                format!("skill `{}` names unknown mode `{}`", s.id, s.mode),
            );
        }
    }

    for (i, s) in h.skills.iter().enumerate() {
        let Some(parent_id) = &s.parent else { continue };
        if parent_id == &s.id {
            push(
                format!("skills[{i}].parent"),
                format!("skill `{}` is its own parent", s.id),
            );
            continue;
        }
        match h.skill(parent_id) {
            None => push(
                format!("skills[{i}].parent"),
                format!("skill `{}` has missing parent `{parent_id}`", s.id),
            ),
            Some(p) => {
                if p.mode != s.mode {
                    push(
                        format!("skills[{i}].parent"),
                        format!(
                            "skill `{}` (mode `{}`) has parent `{}` in mode `{}`",
                            s.id, s.mode, p.id, p.mode
                        ),
                    );
                }
                if p.parent.is_some() {
                    push(
                        format!("skills[{i}].parent"),
                        format!(
                            "skill `{}` exceeds two levels: parent `{}` is itself a child",
                            s.id, p.id
                        ),
                    );
                }
            }
        }
    }

    let mut owner: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (mode, ids) in &h.edges {
        if !mode_ids.contains(mode.as_str()) {
            push(format!("edges.{mode}"), format!("edge source `{mode}` is not a mode"));
        }
        for (j, id) in ids.iter().enumerate() {
            match h.skill(id) {
                None => push(
                    format!("edges.{mode}[{j}]"),
                    format!("edge references missing skill `{id}`"),
                ),
                Some(s) if &s.mode != mode => push(
                    format!("edges.{mode}[{j}]"),
                    format!("skill `{id}` belongs to mode `{}`", s.mode),
                ),
                Some(_) => {}
            }
            owner.entry(id.as_str()).or_default().push(mode.as_str());
        }
    }
    for (i, s) in h.skills.iter().enumerate() {
        match owner.get(s.id.as_str()).map(Vec::len).unwrap_or(0) {
            1 => {}
            0 => push(
                format!("skills[{i}]"),
                format!("skill `{}` is not indexed by any mode", s.id),
            ),
            n => push(
                format!("skills[{i}]"),
                format!("skill `{}` appears in {n} edge entries", s.id),
            ),
        }
    }

    let mut seen_profiles = BTreeSet::new();
    for (i, p) in h.profiles.iter().enumerate() {
        if !seen_profiles.insert((p.agent_id.as_str(), p.mode.as_str())) {
            push(
                format!("profiles[{i}]"),
                format!("duplicate profile for ({}, {})", p.agent_id, p.mode),
            );
        }
        if !mode_ids.contains(p.mode.as_str()) {
            push(
                format!("profiles[{i}].mode"),
                format!("profile for `{}` names unknown mode `{}`", p.agent_id, p.mode),
            );
        }
        for (sid, c) in &p.counters {
            let path = format!("profiles[{i}].counters.{sid}");
            if !(c.alpha.is_finite() && c.alpha > 0.0) {
                push(format!("{path}.alpha"), format!("alpha must be positive, got {}", c.alpha));
            }
            if !(c.beta.is_finite() && c.beta > 0.0) {
                push(format!("{path}.beta"), format!("beta must be positive, got {}", c.beta));
            }
            match h.skill(sid) {
                None => push(path, format!("counter for unknown skill `{sid}`")),
                Some(s) if s.mode != p.mode => push(
                    path,
                    format!("counter skill `{sid}` is not in mode `{}`", p.mode),
                ),
                Some(_) => {}
            }
        }
        if !(p.cost.mean.is_finite() && p.cost.mean >= 0.0) {
            push(
                format!("profiles[{i}].cost.mean"),
                format!("cost mean must be finite and non-negative, got {}", p.cost.mean),
            );
        } else if p.cost.count == 0 && p.cost.mean != 0.0 {
            push(
                format!("profiles[{i}].cost.mean"),
                format!("cost mean {} with zero calls", p.cost.mean),
            );
        }
    }

    out
}

// ── Serialization ───────────────────────────────────────────────────────

/// Canonical JSON: keys sorted at every level, shortest round-trip floats,
/// two-space indentation, trailing newline.
pub fn to_canonical_json(h: &Handbook) -> String {
    let value = serde_json::to_value(h).expect("handbook serializes");
    let mut s = serde_json::to_string_pretty(&sort_keys(value)).expect("value serializes");
    s.push('\n');
    s
}

pub(crate) fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn from_json(text: &str) -> Result<Handbook, HandbookError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let result: Result<Handbook, _> = serde_path_to_error::deserialize(&mut de);
    let h = result.map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        let (line, column) = (inner.line(), inner.column());
        HandbookError::Schema {
            path,
            line,
            column,
            offset: byte_offset(text, line, column),
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| HandbookError::Schema {
        path: ".".into(),
        line: e.line(),
        column: e.column(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(h)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Writes the handbook as canonical JSON. Invalid handbooks are refused.
pub fn save(h: &Handbook, dest: &Path) -> Result<(), HandbookError> {
    let violations = validate(h);
    if !violations.is_empty() {
        return Err(HandbookError::Invalid(violations));
    }
    fs::write(dest, to_canonical_json(h))?;
    Ok(())
}

pub fn load(src: &Path) -> Result<Handbook, HandbookError> {
    from_json(&fs::read_to_string(src)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn figure_fixture() -> Handbook {
        let mut h = Handbook {
            version: 1,
            provenance: "fixture".into(),
            modes: vec![
                ModeMetadata {
                    mode: "code".into(),
                    insights: vec!["switch to code once retrieved facts need computation".into()],
                    allowed_agents: vec!["coder-large".into(), "coder-small".into()],
                },
                ModeMetadata {
                    mode: "search".into(),
                    insights: vec![],
                    allowed_agents: vec!["searcher".into()],
                },
            ],
            ..Default::default()
        };
        h.insert_skill(Skill {
            id: "data_processing".into(),
            description: "transform and compute over structured data".into(),
            indicators: vec!["table".into(), "aggregate".into()],
            parent: None,
            mode: "code".into(),
        });
        h.insert_skill(Skill {
            id: "symbolic_logic".into(),
            description: "verify logical constraints symbolically".into(),
            indicators: vec!["constraint".into(), "logic".into()],
            parent: Some("data_processing".into()),
            mode: "code".into(),
        });
        h.edges.entry("search".into()).or_default();
        let mut p = AgentProfile::new("coder-large", "code");
        p.counters.insert("data_processing".into(), BetaCounter { alpha: 9.0, beta: 2.0 });
        p.counters.insert("symbolic_logic".into(), BetaCounter { alpha: 4.0, beta: 2.0 });
        p.cost = CostStats { mean: 0.8, count: 10 };
        h.profiles.push(p);
        h
    }

    #[test]
    fn empty_handbook_is_valid() {
        assert!(validate(&Handbook::default()).is_empty());
    }

    #[test]
    fn fixture_is_valid() {
        assert_eq!(validate(&figure_fixture()), vec![]);
    }

    #[test]
    fn ghost_edge_is_reported() {
        let mut h = figure_fixture();
        h.edges.get_mut("code").unwrap().push("s_ghost".into());
        let v = validate(&h);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("s_ghost"));
        assert_eq!(v[0].path, "edges.code[2]");
    }

    #[test]
    fn zero_alpha_is_reported() {
        let mut h = figure_fixture();
        h.profiles[0]
            .counters
            .get_mut("symbolic_logic")
            .unwrap()
            .alpha = 0.0;
        let v = validate(&h);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].path, "profiles[0].counters.symbolic_logic.alpha");
    }

    #[test]
    fn three_level_hierarchy_is_rejected() {
        let mut h = figure_fixture();
        h.insert_skill(Skill {
            id: "deep".into(),
            description: String::new(),
            indicators: vec![],
            parent: Some("symbolic_logic".into()),
            mode: "code".into(),
        });
        let v = validate(&h);
        assert!(v.iter().any(|x| x.message.contains("two levels")), "{v:?}");
    }

    #[test]
    fn cost_mean_without_calls_is_rejected() {
        let mut h = figure_fixture();
        h.profiles[0].cost = CostStats { mean: 0.3, count: 0 };
        assert_eq!(validate(&h).len(), 1);
    }

    #[test]
    fn skill_in_two_modes_is_rejected() {
        let mut h = figure_fixture();
        h.edges.get_mut("search").unwrap().push("data_processing".into());
        let v = validate(&h);
        assert!(v.iter().any(|x| x.message.contains("belongs to mode")));
        assert!(v.iter().any(|x| x.message.contains("2 edge entries")));
    }

    #[test]
    fn mode_skills_returns_parent_and_child() {
        let h = figure_fixture();
        let ids: Vec<_> = h.mode_skills("code").unwrap().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["data_processing", "symbolic_logic"]);
        assert!(h.mode_skills("search").unwrap().is_empty());
        assert!(matches!(h.mode_skills("nope"), Err(HandbookError::UnknownMode(_))));
    }

    #[test]
    fn round_trip_and_sorted_keys() {
        let h = figure_fixture();
        let text = to_canonical_json(&h);
        assert_eq!(from_json(&text).unwrap(), h);
        let edges = text.find("\"edges\"").unwrap();
        let modes = text.find("\"modes\"").unwrap();
        let version = text.find("\"version\"").unwrap();
        assert!(edges < modes && modes < version);
    }

    #[test]
    fn missing_version_is_schema_error() {
        let mut v = serde_json::to_value(figure_fixture()).unwrap();
        v.as_object_mut().unwrap().remove("version");
        let err = from_json(&v.to_string()).unwrap_err();
        match err {
            HandbookError::Schema { message, .. } => assert!(message.contains("version")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let mut v = serde_json::to_value(figure_fixture()).unwrap();
        v["skills"][1]
            .as_object_mut()
            .unwrap()
            .insert("embedding".into(), serde_json::json!([0.1]));
        match from_json(&v.to_string()).unwrap_err() {
            HandbookError::Schema { path, .. } => assert_eq!(path, "skills[1].embedding"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_refuses_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = figure_fixture();
        h.edges.get_mut("code").unwrap().push("s_ghost".into());
        assert!(matches!(
            save(&h, &dir.path().join("h.json")),
            Err(HandbookError::Invalid(_))
        ));
    }

    #[test]
    fn next_version_increments_once() {
        let h = figure_fixture();
        let n = h.next_version("learn");
        assert_eq!(n.version, h.version + 1);
        assert!(n.provenance.ends_with("v2: learn"));
    }
}
