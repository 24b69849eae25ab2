//! Pluggable mode policies (π_mode).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{Handbook, ModeId};
use crate::trajectory::InteractionState;

pub const ANSWER_MODE: &str = "answer";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("handbook has no modes")]
    NoModes,
    #[error("policy `{policy}` failed: {diagnostic}")]
    Failed { policy: String, diagnostic: String },
    #[error("policy `{policy}` chose unknown mode `{mode}`")]
    UnknownMode { policy: String, mode: ModeId },
}

/// Chooses the next operational mode from the state and the handbook's
/// mode metadata (including each mode's routing insights).
pub trait ModePolicy: Send + Sync {
    fn name(&self) -> String;

    fn choose(
        &self,
        state: &InteractionState,
        handbook: &Handbook,
        max_turns: usize,
    ) -> Result<ModeId, PolicyError>;
}

/// Applies the forced rules shared by every policy, then defers to `policy`:
/// a single-mode handbook always yields that mode, and the last permitted
/// turn always yields the terminal mode when the handbook has one.
pub fn select_mode(
    state: &InteractionState,
    handbook: &Handbook,
    policy: &dyn ModePolicy,
    max_turns: usize,
    terminal: &str,
) -> Result<ModeId, PolicyError> {
    match handbook.modes.len() {
        0 => return Err(PolicyError::NoModes),
        1 => return Ok(handbook.modes[0].mode.clone()),
        _ => {}
    }
    if state.turn + 1 >= max_turns && handbook.mode(terminal).is_some() {
        return Ok(terminal.to_string());
    }
    let mode = policy.choose(state, handbook, max_turns)?;
    if handbook.mode(&mode).is_none() {
        return Err(PolicyError::UnknownMode {
            policy: policy.name(),
            mode,
        });
    }
    Ok(mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Query tag that triggers the rule, e.g. `needs:search`.
    pub tag: String,
    pub mode: ModeId,
}

/// Pattern table over query tags. The first rule whose tag is present and
/// whose mode has not been visited yet wins; otherwise the terminal mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePolicy {
    pub name: String,
    pub rules: Vec<Rule>,
    pub terminal: ModeId,
}

impl RulePolicy {
    /// `needs:<mode>` rules in the given order.
    pub fn needs_table(name: &str, order: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            rules: order
                .iter()
                .map(|m| Rule {
                    tag: format!("needs:{m}"),
                    mode: m.to_string(),
                })
                .collect(),
            terminal: ANSWER_MODE.to_string(),
        }
    }
}

impl ModePolicy for RulePolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn choose(
        &self,
        state: &InteractionState,
        handbook: &Handbook,
        _max_turns: usize,
    ) -> Result<ModeId, PolicyError> {
        let hit = self.rules.iter().find(|r| {
            state.query.tags.contains(&r.tag)
                && handbook.mode(&r.mode).is_some()
                && !state.has_visited(&r.mode)
        });
        Ok(hit.map_or_else(|| self.terminal.clone(), |r| r.mode.clone()))
    }
}

/// Fixed mode schedule; the terminal mode once the schedule runs out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub schedule: Vec<ModeId>,
    pub terminal: ModeId,
}

impl ModePolicy for ScriptedPolicy {
    fn name(&self) -> String {
        format!("scripted[{}]", self.schedule.join(","))
    }

    fn choose(
        &self,
        state: &InteractionState,
        _handbook: &Handbook,
        _max_turns: usize,
    ) -> Result<ModeId, PolicyError> {
        Ok(self
            .schedule
            .get(state.turn)
            .cloned()
            .unwrap_or_else(|| self.terminal.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handbook::ModeMetadata;
    use crate::trajectory::{HistoryEntry, Query};

    fn hb(modes: &[&str]) -> Handbook {
        Handbook {
            modes: modes
                .iter()
                .map(|m| ModeMetadata {
                    mode: m.to_string(),
                    insights: vec![],
                    allowed_agents: vec![],
                })
                .collect(),
            ..Default::default()
        }
    }

    fn state(tags: &[&str], turn: usize) -> InteractionState {
        let mut s = InteractionState::new(Query {
            id: "q".into(),
            text: String::new(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        });
        for _ in 0..turn {
            s.push(HistoryEntry {
                mode: "x".into(),
                agent: "a".into(),
                trace_digest: String::new(),
                observation_digest: String::new(),
            });
        }
        s
    }

    #[test]
    fn single_mode_is_forced() {
        let p = RulePolicy::needs_table("r", &["search"]);
        let h = hb(&["code"]);
        assert_eq!(select_mode(&state(&["needs:search"], 0), &h, &p, 4, "answer").unwrap(), "code");
    }

    #[test]
    fn rule_table_maps_tags() {
        let p = RulePolicy::needs_table("r", &["search", "code"]);
        let h = hb(&["search", "code", "answer"]);
        assert_eq!(select_mode(&state(&["needs:search"], 0), &h, &p, 4, "answer").unwrap(), "search");
        assert_eq!(select_mode(&state(&[], 0), &h, &p, 4, "answer").unwrap(), "answer");
    }

    #[test]
    fn visited_modes_are_skipped() {
        let p = RulePolicy::needs_table("r", &["search", "code"]);
        let h = hb(&["search", "code", "answer"]);
        let mut s = state(&["needs:search", "needs:code"], 0);
        s.push(HistoryEntry {
            mode: "search".into(),
            agent: "a".into(),
            trace_digest: String::new(),
            observation_digest: String::new(),
        });
        assert_eq!(select_mode(&s, &h, &p, 4, "answer").unwrap(), "code");
    }

    #[test]
    fn last_turn_forces_answer() {
        let p = RulePolicy::needs_table("r", &["search"]);
        let h = hb(&["search", "answer"]);
        assert_eq!(select_mode(&state(&["needs:search"], 3), &h, &p, 4, "answer").unwrap(), "answer");
        assert_eq!(select_mode(&state(&["needs:search"], 0), &h, &p, 1, "answer").unwrap(), "answer");
    }

    #[test]
    fn empty_and_unknown() {
        let p = ScriptedPolicy {
            schedule: vec!["ghost".into()],
            terminal: "answer".into(),
        };
        assert_eq!(select_mode(&state(&[], 0), &hb(&[]), &p, 4, "answer"), Err(PolicyError::NoModes));
        assert!(matches!(
            select_mode(&state(&[], 0), &hb(&["a", "answer"]), &p, 4, "answer"),
            Err(PolicyError::UnknownMode { .. })
        ));
    }

    #[test]
    fn scripted_follows_schedule() {
        let p = ScriptedPolicy {
            schedule: vec!["code".into(), "search".into()],
            terminal: "answer".into(),
        };
        let h = hb(&["search", "code", "answer"]);
        assert_eq!(select_mode(&state(&[], 0), &h, &p, 9, "answer").unwrap(), "code");
        assert_eq!(select_mode(&state(&[], 1), &h, &p, 9, "answer").unwrap(), "search");
        assert_eq!(select_mode(&state(&[], 2), &h, &p, 9, "answer").unwrap(), "answer");
    }
}
