//! Orchestrator-specific handbook selection.
//!
//! A variant fixes, per mode, whether routing sees coarse skills, fine
//! skills or both, and whether mode insights are kept. Every variant is run
//! on a validation set under the same seed; the one maximizing
//! `J = mean reward − λ · mean cost` wins.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::{validate, BetaCounter, Handbook, ModeId};
use crate::router::{run_episodes, Router, RouterError};
use crate::trajectory::{EnvironmentFactory, Query};

/// Costs within this distance count as equal when breaking J ties.
const J_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Both,
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantDescriptor {
    pub granularity: BTreeMap<ModeId, Granularity>,
    pub insights: bool,
}

impl fmt::Display for VariantDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let modes: Vec<String> = self
            .granularity
            .iter()
            .map(|(m, g)| format!("{m}={}", format!("{g:?}").to_lowercase()))
            .collect();
        write!(f, "{};insights={}", modes.join(","), if self.insights { "on" } else { "off" })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandbookVariant {
    pub descriptor: VariantDescriptor,
    pub handbook: Handbook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPoint {
    pub descriptor: String,
    pub mean_reward: f64,
    pub mean_cost: f64,
    pub objective: f64,
    pub queries: usize,
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("every variant failed; first error: {0}")]
    AllFailed(String),
    #[error("variant `{descriptor}` is invalid: {message}")]
    InvalidVariant { descriptor: String, message: String },
    #[error(transparent)]
    Router(#[from] RouterError),
}

// ── Variants ────────────────────────────────────────────────────────────

/// Skills in `mode` that have children.
fn parents_in(h: &Handbook, mode: &str) -> Vec<String> {
    h.skills
        .iter()
        .filter(|s| s.mode == mode && !h.children(&s.id).is_empty())
        .map(|s| s.id.clone())
        .collect()
}

/// Induced handbook for a descriptor. Coarse folds each child's non-prior
/// mass into its parent and drops the children; fine drops the parents and
/// promotes their children to the top level.
pub fn induce(handbook: &Handbook, d: &VariantDescriptor) -> Handbook {
    let mut h = handbook.clone();
    for (mode, g) in &d.granularity {
        let parents = parents_in(&h, mode);
        match g {
            Granularity::Both => {}
            Granularity::Coarse => {
                for parent in &parents {
                    let kids: Vec<String> = h.children(parent).iter().map(|s| s.id.clone()).collect();
                    for p in h.profiles.iter_mut().filter(|p| &p.mode == mode) {
                        let mut c = p.counter(parent);
                        for k in &kids {
                            let kc = p.counter(k);
                            c.alpha += kc.alpha - BetaCounter::PRIOR.alpha;
                            c.beta += kc.beta - BetaCounter::PRIOR.beta;
                        }
                        p.counters.insert(parent.clone(), c);
                    }
                    for k in &kids {
                        h.remove_skill(k);
                    }
                }
            }
            Granularity::Fine => {
                for parent in &parents {
                    for s in h.skills.iter_mut().filter(|s| s.parent.as_ref() == Some(parent)) {
                        s.parent = None;
                    }
                    h.remove_skill(parent);
                }
            }
        }
    }
    if !d.insights {
        for m in &mut h.modes {
            m.insights.clear();
        }
        for p in &mut h.profiles {
            p.routing_signals.clear();
        }
    }
    h
}

/// Per-mode granularity (three choices where the mode has child skills,
/// otherwise only `both`) times the insight toggle, in a fixed order.
pub fn enumerate_variants(handbook: &Handbook) -> Vec<HandbookVariant> {
    let mut combos: Vec<BTreeMap<ModeId, Granularity>> = vec![BTreeMap::new()];
    for m in &handbook.modes {
        let choices: &[Granularity] = if parents_in(handbook, &m.mode).is_empty() {
            &[Granularity::Both]
        } else {
            &[Granularity::Both, Granularity::Coarse, Granularity::Fine]
        };
        combos = combos
            .into_iter()
            .flat_map(|c| {
                choices.iter().map(move |g| {
                    let mut c = c.clone();
                    c.insert(m.mode.clone(), *g);
                    c
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for insights in [true, false] {
        for g in &combos {
            let descriptor = VariantDescriptor {
                granularity: g.clone(),
                insights,
            };
            out.push(HandbookVariant {
                handbook: induce(handbook, &descriptor),
                descriptor,
            });
        }
    }
    out
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Runs every validation query under the variant and reports means and J.
/// Failed agent calls are already folded into the trajectories as failed
/// steps carrying their penalty cost.
pub fn evaluate_variant(
    variant: &HandbookVariant,
    queries: &[Query],
    env: &dyn EnvironmentFactory,
    router: &Router<'_>,
    lambda: f64,
    seed: u64,
) -> Result<EvaluationPoint, SelectError> {
    if queries.is_empty() {
        return Err(SelectError::EmptyValidation);
    }
    let violations = validate(&variant.handbook);
    if let Some(v) = violations.first() {
        return Err(SelectError::InvalidVariant {
            descriptor: variant.descriptor.to_string(),
            message: v.to_string(),
        });
    }
    let ts = run_episodes(queries, &variant.handbook, env, router, seed)?;
    let n = ts.len() as f64;
    let mean_reward = ts.iter().fold(0.0, |a, t| a + t.reward) / n;
    let mean_cost = ts.iter().fold(0.0, |a, t| a + t.total_cost) / n;
    Ok(EvaluationPoint {
        descriptor: variant.descriptor.to_string(),
        mean_reward,
        mean_cost,
        objective: mean_reward - lambda * mean_cost,
        queries: ts.len(),
    })
}

/// Indices of the points not dominated by any other (reward ≥ and cost ≤,
/// one strictly), ordered by cost ascending with input order on ties.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len())
        .filter(|&i| {
            let (ri, ci) = points[i];
            !points
                .iter()
                .any(|&(r, c)| r >= ri && c <= ci && (r > ri || c < ci))
        })
        .collect();
    idx.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(a.cmp(&b)));
    idx
}

pub fn pareto_frontier(points: &[EvaluationPoint]) -> Vec<EvaluationPoint> {
    let rc: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_reward, p.mean_cost)).collect();
    pareto_indices(&rc).into_iter().map(|i| points[i].clone()).collect()
}

/// Index of the J-maximizing point at `lambda`: ties go to the lower cost,
/// then to the earlier point.
pub fn choose_winner(points: &[EvaluationPoint], lambda: f64) -> Option<usize> {
    let j = |p: &EvaluationPoint| p.mean_reward - lambda * p.mean_cost;
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (jb, jp) = (j(&points[b]), j(p));
                let better = jp > jb + J_EPSILON
                    || ((jp - jb).abs() <= J_EPSILON && p.mean_cost < points[b].mean_cost);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Environment / orchestrator tag the selection is keyed on.
    pub orchestrator: String,
    pub lambda: f64,
    pub seed: u64,
    pub points: Vec<EvaluationPoint>,
    pub frontier: Vec<String>,
    pub winner: String,
    /// Variants whose evaluation failed, with the error.
    pub failures: Vec<(String, String)>,
}

impl SelectionReport {
    /// `descriptor,reward,cost,J,on_frontier` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("descriptor,reward,cost,J,on_frontier\n");
        for p in &self.points {
            out.push_str(&format!(
                "\"{}\",{},{},{},{}\n",
                p.descriptor,
                p.mean_reward,
                p.mean_cost,
                p.objective,
                self.frontier.contains(&p.descriptor)
            ));
        }
        out
    }
}

pub fn select_handbook(
    handbook: &Handbook,
    queries: &[Query],
    env: &dyn EnvironmentFactory,
    router: &Router<'_>,
    lambda: f64,
    seed: u64,
) -> Result<(HandbookVariant, SelectionReport), SelectError> {
    if queries.is_empty() {
        return Err(SelectError::EmptyValidation);
    }
    let variants = enumerate_variants(handbook);
    let results: Vec<Result<EvaluationPoint, SelectError>> = variants
        .par_iter()
        .map(|v| evaluate_variant(v, queries, env, router, lambda, seed))
        .collect();
    let mut points = Vec::new();
    let mut survivors = Vec::new();
    let mut failures = Vec::new();
    for (v, r) in variants.into_iter().zip(results) {
        match r {
            Ok(p) => {
                points.push(p);
                survivors.push(v);
            }
            Err(e) => {
                log::warn!("variant `{}` failed: {e}", v.descriptor);
                failures.push((v.descriptor.to_string(), e.to_string()));
            }
        }
    }
    let Some(w) = choose_winner(&points, lambda) else {
        return Err(SelectError::AllFailed(
            failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        ));
    };
    let frontier = pareto_frontier(&points).into_iter().map(|p| p.descriptor).collect();
    let report = SelectionReport {
        orchestrator: env.tag(),
        lambda,
        seed,
        winner: points[w].descriptor.clone(),
        points,
        frontier,
        failures,
    };
    Ok((survivors.swap_remove(w), report))
}

/// Selection stage: the winning variant as a new handbook version.
pub fn select(
    handbook: &Handbook,
    queries: &[Query],
    env: &dyn EnvironmentFactory,
    router: &Router<'_>,
    lambda: f64,
    seed: u64,
) -> Result<(Handbook, SelectionReport), SelectError> {
    let (winner, report) = select_handbook(handbook, queries, env, router, lambda, seed)?;
    let mut h = winner.handbook;
    h.version = handbook.version;
    h.provenance = handbook.provenance.clone();
    let note = format!("select `{}` for {} at lambda {}", report.winner, report.orchestrator, lambda);
    Ok((h.next_version(&note), report))
}
