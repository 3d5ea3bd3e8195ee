#![allow(dead_code)]

use std::collections::BTreeSet;

use dvdlens::model::{AggregatedAttention, Category, LayerGroups, LayerLogits, TokenMap, TraceManifest};
use dvdlens::Trace;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from the simplex (normalized exponentials). With
/// `allow_zeros`, about one entry in five is forced to exactly zero.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize, allow_zeros: bool) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n)
            .map(|_| {
                if allow_zeros && rng.random_bool(0.2) {
                    0.0
                } else {
                    -(1.0 - rng.random::<f64>()).ln()
                }
            })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

/// Focus score written straight from its definition: natural-log entropy
/// normalized by ln N, peak minus the plain average of the rest.
pub fn oracle_focus(a: &[f64], eps: f64) -> f64 {
    let n = a.len();
    let mut peak = 0;
    for i in 1..n {
        if a[i] > a[peak] {
            peak = i;
        }
    }
    let mut rest = 0.0;
    for (i, &x) in a.iter().enumerate() {
        if i != peak {
            rest += x;
        }
    }
    let mut h = 0.0;
    for &x in a {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    (a[peak] - rest / (n - 1) as f64) / (h / (n as f64).ln() + eps)
}

/// Deviation of token `i` by an explicit double loop.
pub fn oracle_deviation(a: &[f64], i: usize) -> f64 {
    let mut others = 0.0;
    let mut count = 0usize;
    for (j, &x) in a.iter().enumerate() {
        if j != i {
            others += x;
            count += 1;
        }
    }
    a[i] - others / count as f64
}

pub fn manifest(n_layers: usize, n_steps: usize) -> TraceManifest {
    TraceManifest {
        format_version: 1,
        model_id: "test".into(),
        n_layers,
        n_heads: 8,
        n_steps,
        scheduler_timesteps: (0..n_steps).map(|s| (1000 - 20 * s) as f64).collect(),
        layer_groups: LayerGroups::default_for(n_layers),
    }
}

pub fn token_map(n_tokens: usize) -> TokenMap {
    let tokens: Vec<String> = (0..n_tokens).map(|i| format!("w{i}")).collect();
    TokenMap {
        prompt_text: tokens.join(" "),
        tokens,
        dominant_idx: Some(n_tokens - 1),
        dominated_idx: Some(0),
        category: Category::Object,
    }
}

pub fn trace_from_values(n_layers: usize, n_steps: usize, n_tokens: usize, values: Vec<f32>) -> Trace {
    Trace {
        manifest: manifest(n_layers, n_steps),
        token_map: token_map(n_tokens),
        attention: AggregatedAttention::new(n_layers, n_steps, n_tokens, values).unwrap(),
        head_logits: None,
    }
}

/// A valid trace with random simplex rows.
pub fn random_trace(rng: &mut ChaCha8Rng, n_layers: usize, n_steps: usize, n_tokens: usize) -> Trace {
    let values = (0..n_layers * n_steps)
        .flat_map(|_| simplex(rng, n_tokens, false))
        .map(|x| x as f32)
        .collect();
    trace_from_values(n_layers, n_steps, n_tokens, values)
}

pub fn random_logits(rng: &mut ChaCha8Rng, layer: usize, shape: [usize; 4]) -> LayerLogits {
    let values = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-8.0f32..8.0))
        .collect();
    LayerLogits::new(layer, shape, values).unwrap()
}

/// Mean of raw attention rows over `layers` at `step`, read straight from
/// the flat buffer.
pub fn brute_mean_row(trace: &Trace, layers: &BTreeSet<usize>, step: usize) -> Vec<f64> {
    let [_, s, n] = trace.attention.shape();
    let v = trace.attention.values();
    let mut out = vec![0.0; n];
    for &l in layers {
        let base = ((l - 1) * s + step) * n;
        for t in 0..n {
            out[t] += f64::from(v[base + t]);
        }
    }
    out.iter_mut().for_each(|x| *x /= layers.len() as f64);
    out
}

pub fn brute_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
