//! Seeded synthetic traces with known ground truth.
//!
//! Each attention row is `softmax(init + s * drift + noise)` where `init`
//! and `drift` are per-token vectors chosen by the layer's group and `noise`
//! is Gaussian. Noise comes from ChaCha8 seeded with the trace seed, drawn
//! in `[layer][step][token]` order, so the same parameters always produce
//! the same bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    AggregatedAttention, Category, HeadLogits, LayerGroups, LayerLogits, TokenMap, Trace, TraceManifest,
};

/// Recorded in the manifest's `model_id` of every synthetic trace.
pub const GENERATOR_ID: &str = "synthetic/chacha8-normal";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid synthetic parameters: {0}")]
pub struct InvalidParams(pub String);

/// Per-token initial logits and per-step logit drift for one layer group.
/// Empty vectors stand for all zeros.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupDynamics {
    pub init: Vec<f64>,
    pub drift: Vec<f64>,
}

impl GroupDynamics {
    fn logit(&self, token: usize, step: usize) -> f64 {
        let init = self.init.get(token).copied().unwrap_or(0.0);
        let drift = self.drift.get(token).copied().unwrap_or(0.0);
        init + step as f64 * drift
    }
}

/// Dynamics of the default layer groups; `other` covers layers in no group.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSet {
    pub down: GroupDynamics,
    pub mid: GroupDynamics,
    pub lowres: GroupDynamics,
    pub other: GroupDynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_steps: usize,
    pub n_heads: usize,
    /// Spatial positions per head in the emitted head logits; 0 emits none.
    pub n_positions: usize,
    pub dominant_idx: Option<usize>,
    pub dominated_idx: Option<usize>,
    pub groups: GroupSet,
    pub noise_std: f64,
    pub seed: u64,
    pub category: Category,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            n_layers: 16,
            n_steps: 50,
            n_heads: 8,
            n_positions: 0,
            dominant_idx: Some(2),
            dominated_idx: Some(5),
            groups: GroupSet::default(),
            noise_std: 0.0,
            seed: 0,
            category: Category::Other,
        }
    }
}

impl SynthParams {
    pub fn check(&self) -> Result<(), InvalidParams> {
        let fail = |m: String| Err(InvalidParams(m));
        if self.n_tokens < 2 {
            return fail(format!("n_tokens must be at least 2, got {}", self.n_tokens));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_steps", self.n_steps),
            ("n_heads", self.n_heads),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, idx) in [
            ("dominant_idx", self.dominant_idx),
            ("dominated_idx", self.dominated_idx),
        ] {
            if let Some(i) = idx.filter(|&i| i >= self.n_tokens) {
                return fail(format!("{name} {i} out of range for {} tokens", self.n_tokens));
            }
        }
        if self.dominant_idx.is_some() && self.dominant_idx == self.dominated_idx {
            return fail("dominant_idx and dominated_idx must differ".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        let g = &self.groups;
        for (name, d) in [
            ("down", &g.down),
            ("mid", &g.mid),
            ("lowres", &g.lowres),
            ("other", &g.other),
        ] {
            for (what, v) in [("init", &d.init), ("drift", &d.drift)] {
                if !v.is_empty() && v.len() != self.n_tokens {
                    return fail(format!(
                        "{name}.{what} has {} entries, expected {}",
                        v.len(),
                        self.n_tokens
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return fail(format!("{name}.{what} has non-finite entries"));
                }
            }
        }
        Ok(())
    }

    fn layer_groups(&self) -> LayerGroups {
        LayerGroups::default_for(self.n_layers)
    }

    fn dynamics_for(&self, groups: &LayerGroups, layer: usize) -> &GroupDynamics {
        if groups.down.contains(&layer) {
            &self.groups.down
        } else if groups.mid.contains(&layer) {
            &self.groups.mid
        } else if groups.lowres.contains(&layer) {
            &self.groups.lowres
        } else {
            &self.groups.other
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn noise(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("noise_std checked non-negative")
}

/// Attention before f32 storage, row-major `[layer][step][token]`, plus the
/// generator state for any draws that follow.
fn attention_rows(params: &SynthParams) -> (Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dist = noise(params.noise_std);
    let groups = params.layer_groups();
    let n = params.n_tokens;
    let mut out = Vec::with_capacity(params.n_layers * params.n_steps * n);
    let mut row = vec![0.0; n];
    for layer in 1..=params.n_layers {
        let dyn_ = params.dynamics_for(&groups, layer);
        for step in 0..params.n_steps {
            for (token, v) in row.iter_mut().enumerate() {
                *v = dyn_.logit(token, step);
                if params.noise_std > 0.0 {
                    *v += dist.sample(&mut rng);
                }
            }
            softmax_in_place(&mut row);
            out.extend_from_slice(&row);
        }
    }
    (out, rng)
}

/// Attention probabilities in double precision, before quantization.
pub fn attention_f64(params: &SynthParams) -> Result<Vec<f64>, InvalidParams> {
    params.check()?;
    Ok(attention_rows(params).0)
}

pub fn gen_trace(params: &SynthParams) -> Result<Trace, InvalidParams> {
    params.check()?;
    let (rows, mut rng) = attention_rows(params);
    let values = rows.iter().map(|&v| v as f32).collect();
    let attention = AggregatedAttention::new(params.n_layers, params.n_steps, params.n_tokens, values)
        .expect("generator fills the full shape");

    let head_logits = (params.n_positions > 0).then(|| {
        let dist = noise(params.noise_std);
        let groups = params.layer_groups();
        let shape = [params.n_heads, params.n_steps, params.n_positions, params.n_tokens];
        let layers = (1..=params.n_layers)
            .map(|layer| {
                let dyn_ = params.dynamics_for(&groups, layer);
                let mut values = Vec::with_capacity(shape.iter().product());
                for _head in 0..params.n_heads {
                    for step in 0..params.n_steps {
                        for _pos in 0..params.n_positions {
                            for token in 0..params.n_tokens {
                                let jitter = if params.noise_std > 0.0 {
                                    dist.sample(&mut rng)
                                } else {
                                    0.0
                                };
                                values.push((dyn_.logit(token, step) + jitter) as f32);
                            }
                        }
                    }
                }
                LayerLogits::new(layer, shape, values).expect("generator fills the full shape")
            })
            .collect();
        HeadLogits::new(layers)
    });

    let manifest = TraceManifest {
        format_version: 1,
        model_id: format!("{GENERATOR_ID}/seed={}", params.seed),
        n_layers: params.n_layers,
        n_heads: params.n_heads,
        n_steps: params.n_steps,
        scheduler_timesteps: (0..params.n_steps).map(|s| (params.n_steps - s) as f64).collect(),
        layer_groups: params.layer_groups(),
    };
    let tokens: Vec<String> = (0..params.n_tokens).map(|i| format!("tok{i}")).collect();
    let token_map = TokenMap {
        prompt_text: tokens.join(" "),
        tokens,
        dominant_idx: params.dominant_idx,
        dominated_idx: params.dominated_idx,
        category: params.category,
    };
    Ok(Trace {
        manifest,
        token_map,
        attention,
        head_logits,
    })
}

/// Population description for a labelled positive/negative corpus.
///
/// Positives get `lowres.init[dominant] = boost` with the boost drawn
/// uniformly from `pos_boost`, and the dominated token drifts by
/// `pos_dominated_drift` per step in the mid group. Every other init logit
/// in both populations is drawn from `N(0, jitter^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count_pos: usize,
    pub count_neg: usize,
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_steps: usize,
    pub n_heads: usize,
    pub pos_boost: (f64, f64),
    pub pos_dominated_drift: f64,
    pub jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count_pos: 10,
            count_neg: 10,
            n_tokens: 8,
            n_layers: 16,
            n_steps: 50,
            n_heads: 8,
            pos_boost: (2.0, 4.0),
            pos_dominated_drift: -0.05,
            jitter: 0.01,
            noise_std: 0.002,
            seed: 0,
        }
    }
}

/// A generated corpus. Traces keep their generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pos: Vec<Trace>,
    pub neg: Vec<Trace>,
}

fn jitter_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = noise(std);
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Parameters for every trace of the corpus, positives first.
pub fn corpus_params(spec: &CorpusSpec) -> Result<(Vec<SynthParams>, Vec<SynthParams>), InvalidParams> {
    if spec.count_pos == 0 || spec.count_neg == 0 {
        return Err(InvalidParams("corpus counts must be at least 1".into()));
    }
    if spec.n_tokens < 3 {
        return Err(InvalidParams("corpus traces need at least 3 tokens".into()));
    }
    let (lo, hi) = spec.pos_boost;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(InvalidParams(format!("bad pos_boost range ({lo}, {hi})")));
    }
    if !(spec.jitter >= 0.0) || !spec.jitter.is_finite() {
        return Err(InvalidParams(format!(
            "jitter must be non-negative, got {}",
            spec.jitter
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_tokens;
    let base = SynthParams {
        n_tokens: n,
        n_layers: spec.n_layers,
        n_steps: spec.n_steps,
        n_heads: spec.n_heads,
        noise_std: spec.noise_std,
        ..SynthParams::default()
    };
    let groups = |rng: &mut ChaCha8Rng| GroupSet {
        down: GroupDynamics {
            init: jitter_vec(rng, n, spec.jitter),
            drift: vec![],
        },
        mid: GroupDynamics {
            init: jitter_vec(rng, n, spec.jitter),
            drift: vec![],
        },
        lowres: GroupDynamics {
            init: jitter_vec(rng, n, spec.jitter),
            drift: vec![],
        },
        other: GroupDynamics {
            init: jitter_vec(rng, n, spec.jitter),
            drift: vec![],
        },
    };

    let mut pos = Vec::with_capacity(spec.count_pos);
    for _ in 0..spec.count_pos {
        // token 0 plays the start token and is never a concept
        let dominant = rng.random_range(1..n);
        let mut dominated = rng.random_range(1..n - 1);
        if dominated >= dominant {
            dominated += 1;
        }
        let boost = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mut g = groups(&mut rng);
        g.lowres.init[dominant] += boost;
        g.mid.drift = vec![0.0; n];
        g.mid.drift[dominated] = spec.pos_dominated_drift;
        pos.push(SynthParams {
            dominant_idx: Some(dominant),
            dominated_idx: Some(dominated),
            groups: g,
            seed: rng.random(),
            ..base.clone()
        });
    }
    let mut neg = Vec::with_capacity(spec.count_neg);
    for _ in 0..spec.count_neg {
        let a = rng.random_range(1..n);
        let mut b = rng.random_range(1..n - 1);
        if b >= a {
            b += 1;
        }
        let g = groups(&mut rng);
        neg.push(SynthParams {
            dominant_idx: Some(a),
            dominated_idx: Some(b),
            groups: g,
            seed: rng.random(),
            ..base.clone()
        });
    }
    Ok((pos, neg))
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus, InvalidParams> {
    let (pos, neg) = corpus_params(spec)?;
    let build = |ps: Vec<SynthParams>| ps.par_iter().map(gen_trace).collect::<Result<Vec<_>, _>>();
    Ok(Corpus {
        pos: build(pos)?,
        neg: build(neg)?,
    })
}
