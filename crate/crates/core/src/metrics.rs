//! Evaluation metrics: objective, selection distribution and entropy,
//! paired bootstrap intervals, Pareto plot data.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handbook::AgentId;
use crate::selector::pareto_indices;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no trajectories to evaluate")]
    Empty,
    #[error("paired samples differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
}

/// Shannon entropy in bits of a count or weight vector; zero entries are
/// skipped and the weights are normalized first.
pub fn entropy_bits(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h = -weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / total;
            p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// How often each agent was called, over every step of every trajectory.
pub fn selection_counts(trajectories: &[Trajectory]) -> BTreeMap<AgentId, usize> {
    let mut out = BTreeMap::new();
    for s in trajectories.iter().flat_map(|t| &t.steps) {
        *out.entry(s.agent.clone()).or_insert(0) += 1;
    }
    out
}

pub fn selection_entropy(trajectories: &[Trajectory]) -> f64 {
    let counts: Vec<f64> = selection_counts(trajectories).values().map(|c| *c as f64).collect();
    entropy_bits(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub queries: usize,
    pub mean_reward: f64,
    pub mean_cost: f64,
    pub total_cost: f64,
    /// J at each configured λ, keyed by the λ's decimal form.
    pub objective: BTreeMap<String, f64>,
    pub selection: BTreeMap<AgentId, usize>,
    pub selection_share: BTreeMap<AgentId, f64>,
    pub entropy_bits: f64,
}

pub fn evaluate(method: &str, trajectories: &[Trajectory], lambdas: &[f64]) -> Result<EvalReport, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = trajectories.len() as f64;
    let mean_reward = trajectories.iter().fold(0.0, |a, t| a + t.reward) / n;
    let total_cost = trajectories.iter().fold(0.0, |a, t| a + t.total_cost);
    let mean_cost = total_cost / n;
    let selection = selection_counts(trajectories);
    let calls: usize = selection.values().sum();
    Ok(EvalReport {
        method: method.to_string(),
        queries: trajectories.len(),
        mean_reward,
        mean_cost,
        total_cost,
        objective: lambdas
            .iter()
            .map(|l| (format!("{l}"), mean_reward - l * mean_cost))
            .collect(),
        selection_share: selection
            .iter()
            .map(|(a, c)| (a.clone(), *c as f64 / calls.max(1) as f64))
            .collect(),
        entropy_bits: selection_entropy(trajectories),
        selection,
    })
}

/// Per-query J values, in trajectory order.
pub fn per_query_objective(trajectories: &[Trajectory], lambda: f64) -> Vec<f64> {
    trajectories.iter().map(|t| t.objective(lambda)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub mean_difference: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl BootstrapInterval {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Percentile bootstrap interval for mean(a − b) over paired samples.
pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapInterval, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Unpaired(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| {
        let i = ((q * means.len() as f64).floor() as usize).min(means.len() - 1);
        means[i]
    };
    Ok(BootstrapInterval {
        mean_difference: mean,
        lower: at(tail),
        upper: at(1.0 - tail),
        level,
    })
}

/// `method,reward,cost,on_frontier` rows, one per report.
pub fn pareto_csv(reports: &[EvalReport]) -> String {
    let pts: Vec<(f64, f64)> = reports.iter().map(|r| (r.mean_reward, r.mean_cost)).collect();
    let front = pareto_indices(&pts);
    let mut out = String::from("method,reward,cost,on_frontier\n");
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            r.mean_reward,
            r.mean_cost,
            front.contains(&i)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_definitions() {
        assert_eq!(entropy_bits(&[10.0]), 0.0);
        assert_eq!(entropy_bits(&[10.0, 0.0, 0.0]), 0.0);
        assert!((entropy_bits(&[1.0, 1.0, 1.0, 1.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_profile_entropy() {
        // Shares renormalized over their 99.33% total and summed by hand
        // as −Σ p·log2 p.
        let h = entropy_bits(&[98.02, 0.92, 0.35, 0.04]);
        assert!((h - 0.114715441720818).abs() < 1e-12, "{h}");
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let a: Vec<f64> = (0..200).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let b = vec![0.0; 200];
        let ci = paired_bootstrap(&a, &b, 2000, 0.95, 7).unwrap();
        assert!(ci.lower <= ci.mean_difference && ci.mean_difference <= ci.upper);
        assert!(ci.excludes_zero());
        assert!(paired_bootstrap(&a, &b[..3], 10, 0.95, 7).is_err());
    }
}
