//! Pure evaluation metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset token overlap F1. An empty prediction scores zero.
pub fn token_f1<T: Eq + Hash>(prediction: &[T], reference: &[T]) -> Result<F1> {
    if reference.is_empty() {
        return Err(Error::contract("token_f1 needs a nonempty reference"));
    }
    if prediction.is_empty() {
        return Ok(F1 { precision: 0.0, recall: 0.0, f1: 0.0 });
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let precision = overlap as f64 / prediction.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    Ok(F1 { precision, recall, f1: f_measure(precision, recall) })
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub recall: f64,
    pub precision: f64,
    pub beta: f64,
    pub score: f64,
}

/// `(1 + β²)·R·P / (R + β²·P)` over LCS recall and precision.
pub fn rouge_l<T: PartialEq>(prediction: &[T], reference: &[T], beta: f64) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(Error::contract("rouge_l needs a nonempty reference"));
    }
    if !(beta > 0.0) {
        return Err(Error::config("beta", "must be positive"));
    }
    let lcs = lcs_len(prediction, reference) as f64;
    let recall = lcs / reference.len() as f64;
    let precision = if prediction.is_empty() { 0.0 } else { lcs / prediction.len() as f64 };
    let b2 = beta * beta;
    let denom = recall + b2 * precision;
    let score = if denom == 0.0 { 0.0 } else { (1.0 + b2) * recall * precision / denom };
    Ok(RougeL { recall, precision, beta, score })
}

pub fn perplexity(mean_ce: f64) -> Result<f64> {
    if !mean_ce.is_finite() || mean_ce < 0.0 {
        return Err(Error::NonFinite { op: "perplexity" });
    }
    Ok(mean_ce.exp())
}

/// Sequences per second.
pub fn throughput(n_seq: usize, t_total: f64) -> Result<f64> {
    if !(t_total > 0.0) {
        return Err(Error::contract("throughput needs a positive duration"));
    }
    Ok(n_seq as f64 / t_total)
}

/// Megabytes at four bytes per parameter.
pub fn memory_footprint(n_params: usize) -> f64 {
    n_params as f64 * 4.0 / (1024.0 * 1024.0)
}

/// Percentage of routing decisions that agree with the oracle.
pub fn routing_efficiency(n_correct: usize, n_total: usize) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::contract("routing_efficiency needs at least one decision"));
    }
    if n_correct > n_total {
        return Err(Error::contract("more correct decisions than decisions"));
    }
    Ok(n_correct as f64 / n_total as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub accuracy: f64,
    pub latency: f64,
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, accuracy: f64, latency: f64) -> Self {
        Self { label: label.into(), accuracy, latency, dominated: false }
    }

    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.accuracy >= other.accuracy && self.latency <= other.latency && (self.accuracy > other.accuracy || self.latency < other.latency)
    }
}

/// Sets every dominance flag and returns the non-dominated points sorted by
/// latency, then label.
pub fn pareto_frontier(points: &mut [ParetoPoint]) -> Vec<ParetoPoint> {
    let flags: Vec<bool> = points.iter().map(|p| points.iter().any(|q| q.dominates(p))).collect();
    for (p, d) in points.iter_mut().zip(flags) {
        p.dominated = d;
    }
    let mut front: Vec<ParetoPoint> = points.iter().filter(|p| !p.dominated).cloned().collect();
    front.sort_by(|a, b| a.latency.total_cmp(&b.latency).then_with(|| a.label.cmp(&b.label)));
    front
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("slope needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::contract("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("slope needs distinct x values"));
    }
    Ok(sxy / sxx)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
