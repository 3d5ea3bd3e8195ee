//! Attention concentration metrics.
//!
//! All distributions are probability vectors over the prompt tokens of one
//! attention row. Entropy is measured in bits so that `H / log2(N)` lies in
//! [0, 1].

use std::collections::BTreeSet;

use serde::Serialize;

use crate::model::{Trace, ROW_SUM_TOLERANCE};
use crate::stats;

pub const DEFAULT_FOCUS_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("token index {index} out of range for {n_tokens} tokens")]
    IndexOutOfRange { index: usize, n_tokens: usize },
    #[error("layer set is empty")]
    EmptyLayerSet,
    #[error("layer {layer} outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("step {step} out of range for {n_steps} steps")]
    StepOutOfRange { step: usize, n_steps: usize },
    #[error("series of length {0} is too short for differencing")]
    TooShort(usize),
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("vector {0} has zero norm")]
    ZeroNormVector(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("focus epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FocusParams {
    pub epsilon: f64,
}

impl Default for FocusParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_FOCUS_EPSILON,
        }
    }
}

impl FocusParams {
    pub fn new(epsilon: f64) -> Result<Self, MetricError> {
        if epsilon > 0.0 && epsilon.is_finite() {
            Ok(Self { epsilon })
        } else {
            Err(MetricError::BadEpsilon(epsilon))
        }
    }
}

fn check_distribution(dist: &[f64]) -> Result<(), MetricError> {
    if dist.is_empty() {
        return Err(MetricError::NotADistribution("empty vector".into()));
    }
    if let Some((i, v)) = dist.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(MetricError::NotADistribution(format!("entry {i} is {v}")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(MetricError::NotADistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_bits(dist: &[f64]) -> Result<f64, MetricError> {
    check_distribution(dist)?;
    Ok(dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum())
}

/// Peak-minus-rest gap over length-normalized entropy:
///
/// `(max_i a_i - mean_{j != argmax} a_j) / (H(a) / log2 N + epsilon)`
pub fn focus_score(dist: &[f64], params: FocusParams) -> Result<f64, MetricError> {
    let n = dist.len();
    if n < 2 {
        return Err(MetricError::NotADistribution(format!(
            "need at least 2 entries, got {n}"
        )));
    }
    let h = entropy_bits(dist)?;
    let peak = argmax(dist);
    let numerator = deviation_unchecked(dist, peak);
    Ok(numerator / (h / (n as f64).log2() + params.epsilon))
}

/// `a_i` minus the mean of the other `N - 1` entries.
pub fn attention_deviation(dist: &[f64], i: usize) -> Result<f64, MetricError> {
    if i >= dist.len() {
        return Err(MetricError::IndexOutOfRange {
            index: i,
            n_tokens: dist.len(),
        });
    }
    if dist.len() < 2 {
        return Err(MetricError::NotADistribution("need at least 2 entries".into()));
    }
    Ok(deviation_unchecked(dist, i))
}

/// Written as the mean of `a_i - a_j` over `j != i`, which is exactly zero
/// for a uniform row.
fn deviation_unchecked(dist: &[f64], i: usize) -> f64 {
    let gaps: f64 = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, v)| dist[i] - v)
        .sum();
    gaps / (dist.len() - 1) as f64
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_layers(trace: &Trace, layers: &BTreeSet<usize>) -> Result<(), MetricError> {
    if layers.is_empty() {
        return Err(MetricError::EmptyLayerSet);
    }
    let n_layers = trace.attention.n_layers();
    match layers.iter().find(|&&l| l == 0 || l > n_layers) {
        Some(&layer) => Err(MetricError::LayerOutOfRange { layer, n_layers }),
        None => Ok(()),
    }
}

fn check_step(trace: &Trace, step: usize) -> Result<(), MetricError> {
    let n_steps = trace.attention.n_steps();
    if step >= n_steps {
        return Err(MetricError::StepOutOfRange { step, n_steps });
    }
    Ok(())
}

/// Element-wise mean of the attention rows of `layers` at `step`.
pub fn mean_row(trace: &Trace, layers: &BTreeSet<usize>, step: usize) -> Result<Vec<f64>, MetricError> {
    check_layers(trace, layers)?;
    check_step(trace, step)?;
    let mut acc = vec![0.0; trace.attention.n_tokens()];
    for &l in layers {
        for (a, &v) in acc.iter_mut().zip(trace.attention.row(l, step)) {
            *a += f64::from(v);
        }
    }
    let k = layers.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Attention deviation of one token over generation steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSeries {
    pub token_idx: usize,
    pub layer_set: BTreeSet<usize>,
    /// One value per step, generation order.
    pub alpha: Vec<f64>,
}

pub fn deviation_series(trace: &Trace, layers: &BTreeSet<usize>, token: usize) -> Result<DeviationSeries, MetricError> {
    check_layers(trace, layers)?;
    let n_tokens = trace.attention.n_tokens();
    if token >= n_tokens {
        return Err(MetricError::IndexOutOfRange { index: token, n_tokens });
    }
    let alpha = (0..trace.attention.n_steps())
        .map(|s| attention_deviation(&mean_row(trace, layers, s)?, token))
        .collect::<Result<_, _>>()?;
    Ok(DeviationSeries {
        token_idx: token,
        layer_set: layers.clone(),
        alpha,
    })
}

/// Step-over-step change, later minus earlier. Negative entries mean the
/// token is losing relative attention as generation proceeds.
pub fn delta_series(series: &DeviationSeries) -> Result<Vec<f64>, MetricError> {
    if series.alpha.len() < 2 {
        return Err(MetricError::TooShort(series.alpha.len()));
    }
    Ok(series.alpha.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Means of consecutive chunks of `bin_size`; a short final chunk is
/// averaged over its own length. `bin_size` of 0 is treated as 1.
pub fn bin_deltas(deltas: &[f64], bin_size: usize) -> Vec<f64> {
    deltas.chunks(bin_size.max(1)).map(stats::mean).collect()
}

/// Token receiving the most attention, averaged over `layers`, at `step`.
pub fn peak_token(trace: &Trace, layers: &BTreeSet<usize>, step: usize) -> Result<usize, MetricError> {
    Ok(argmax(&mean_row(trace, layers, step)?))
}

/// Focus score of every layer (1..=L, in order) at `step`.
pub fn layer_focus_profile(trace: &Trace, step: usize, params: FocusParams) -> Result<Vec<f64>, MetricError> {
    check_step(trace, step)?;
    (1..=trace.attention.n_layers())
        .map(|l| focus_score(&trace.attention.row_f64(l, step), params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceSummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Number of pairwise distances.
    pub count: usize,
}

/// Summary of all pairwise cosine distances `1 - cos(u, v)`.
pub fn cosine_distance_stats(embeddings: &[Vec<f64>]) -> Result<DistanceSummary, MetricError> {
    if embeddings.len() < 2 {
        return Err(MetricError::TooFewVectors {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let dim = embeddings[0].len();
    if let Some(v) = embeddings.iter().find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch {
            left: dim,
            right: v.len(),
        });
    }
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(MetricError::ZeroNormVector(i));
    }
    let mut distances = Vec::with_capacity(embeddings.len() * (embeddings.len() - 1) / 2);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let dot: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
            distances.push(1.0 - dot / (norms[i] * norms[j]));
        }
    }
    distances.sort_by(f64::total_cmp);
    Ok(DistanceSummary {
        median: stats::quantile_sorted(&distances, 0.5),
        q25: stats::quantile_sorted(&distances, 0.25),
        q75: stats::quantile_sorted(&distances, 0.75),
        count: distances.len(),
    })
}

/// Euclidean norm of the guidance direction `cond - uncond`.
pub fn noise_magnitude(cond: &[f64], uncond: &[f64]) -> Result<f64, MetricError> {
    if cond.len() != uncond.len() {
        return Err(MetricError::DimensionMismatch {
            left: cond.len(),
            right: uncond.len(),
        });
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| (c - u) * (c - u))
        .sum::<f64>()
        .sqrt())
}
