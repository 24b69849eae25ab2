use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::handbook::{Handbook, HandbookError, SkillId};
use crate::text::{bag_cosine, hashed_bag};
use crate::trajectory::InteractionState;

/// Similarity between the interaction state and a skill's text.
///
/// The default is cosine over hashed token multisets; external embedding
/// services plug in through this trait.
pub trait Similarity: Send + Sync {
    fn similarity(&self, state_text: &str, skill_text: &str) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenCosine;

impl Similarity for TokenCosine {
    fn similarity(&self, state_text: &str, skill_text: &str) -> f64 {
        bag_cosine(&hashed_bag(state_text), &hashed_bag(skill_text))
    }
}

/// Σ_t with weights w_{t,σ}. Weights sum to one whenever the set is nonempty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActiveSkillSet {
    pub entries: BTreeMap<SkillId, f64>,
}

impl ActiveSkillSet {
    pub fn uniform<I: IntoIterator<Item = SkillId>>(ids: I) -> Self {
        let ids: Vec<SkillId> = ids.into_iter().collect();
        let w = 1.0 / ids.len() as f64;
        Self {
            entries: ids.into_iter().map(|id| (id, w)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Up to `k` skills of `mode` whose similarity to the state exceeds
/// `threshold`, weighted by normalized similarity. Falls back to uniform
/// weights over every skill of the mode when nothing qualifies.
pub fn retrieve_active_skills(
    state: &InteractionState,
    mode: &str,
    handbook: &Handbook,
    k: usize,
    threshold: f64,
    similarity: &dyn Similarity,
) -> Result<ActiveSkillSet, HandbookError> {
    let skills = handbook.mode_skills(mode)?;
    if skills.is_empty() {
        return Ok(ActiveSkillSet::default());
    }
    let text = state.retrieval_text();
    let mut scored: Vec<(usize, f64)> = skills
        .iter()
        .enumerate()
        .map(|(i, s)| (i, similarity.similarity(&text, &s.match_text())))
        .filter(|(_, sim)| *sim > threshold && sim.is_finite())
        .collect();
    // Highest similarity first; registry order breaks ties.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    let total: f64 = scored.iter().map(|(_, s)| s).sum();
    if scored.is_empty() || total <= 0.0 {
        return Ok(ActiveSkillSet::uniform(skills.iter().map(|s| s.id.clone())));
    }
    Ok(ActiveSkillSet {
        entries: scored
            .into_iter()
            .map(|(i, sim)| (skills[i].id.clone(), sim / total))
            .collect(),
    })
}
