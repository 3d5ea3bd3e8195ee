//! Immutable domain types for an exported cross-attention trace.
//!
//! A [`Trace`] bundles the manifest, the prompt's token map, the aggregated
//! attention tensor `[layer][step][token]` and, optionally, per-head
//! pre-softmax logits. Layers are 1-based; steps are 0-based in generation
//! order, so step 0 is the first denoising step.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Absolute tolerance for attention rows summing to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Artist,
    Landmark,
    Character,
    Object,
    #[default]
    Other,
}

/// Prompt tokens together with the designated concept token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMap {
    pub prompt_text: String,
    pub tokens: Vec<String>,
    pub dominant_idx: Option<usize>,
    pub dominated_idx: Option<usize>,
    pub category: Category,
}

impl TokenMap {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Named layer groups, 1-based layer ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub down: BTreeSet<usize>,
    pub mid: BTreeSet<usize>,
    pub lowres: BTreeSet<usize>,
}

impl Default for LayerGroups {
    fn default() -> Self {
        Self {
            down: (1..=6).collect(),
            mid: BTreeSet::from([7]),
            lowres: BTreeSet::from([8, 9, 10]),
        }
    }
}

impl LayerGroups {
    /// Default groups restricted to layers that exist in an `n_layers` model.
    pub fn default_for(n_layers: usize) -> Self {
        let keep = |set: BTreeSet<usize>| set.into_iter().filter(|&l| l <= n_layers).collect();
        let d = Self::default();
        Self {
            down: keep(d.down),
            mid: keep(d.mid),
            lowres: keep(d.lowres),
        }
    }

    fn named(&self) -> [(&'static str, &BTreeSet<usize>); 3] {
        [("down", &self.down), ("mid", &self.mid), ("lowres", &self.lowres)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_steps: usize,
    /// Scheduler timesteps in generation order (strictly decreasing).
    pub scheduler_timesteps: Vec<f64>,
    pub layer_groups: LayerGroups,
}

/// Attention weights averaged over spatial positions and heads, stored
/// row-major as `[layer][step][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    n_layers: usize,
    n_steps: usize,
    n_tokens: usize,
    values: Vec<f32>,
}

/// Error raised when a flat buffer does not match the declared shape.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("buffer of length {actual} does not match shape {shape:?}")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub actual: usize,
}

impl AggregatedAttention {
    pub fn new(n_layers: usize, n_steps: usize, n_tokens: usize, values: Vec<f32>) -> Result<Self, ShapeError> {
        if n_layers * n_steps * n_tokens != values.len() {
            return Err(ShapeError {
                shape: vec![n_layers, n_steps, n_tokens],
                actual: values.len(),
            });
        }
        Ok(Self {
            n_layers,
            n_steps,
            n_tokens,
            values,
        })
    }

    /// Builds the tensor from nested `[layer][step][token]` rows.
    pub fn from_rows(rows: &[Vec<Vec<f32>>]) -> Result<Self, ShapeError> {
        let n_layers = rows.len();
        let n_steps = rows.first().map_or(0, Vec::len);
        let n_tokens = rows.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let values: Vec<f32> = rows.iter().flatten().flatten().copied().collect();
        let ragged = rows
            .iter()
            .any(|l| l.len() != n_steps || l.iter().any(|r| r.len() != n_tokens));
        if ragged {
            return Err(ShapeError {
                shape: vec![n_layers, n_steps, n_tokens],
                actual: values.len(),
            });
        }
        Self::new(n_layers, n_steps, n_tokens, values)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_layers, self.n_steps, self.n_tokens]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Row for a 1-based `layer` and 0-based `step`.
    ///
    /// Panics when either index is out of range.
    pub fn row(&self, layer: usize, step: usize) -> &[f32] {
        assert!(
            (1..=self.n_layers).contains(&layer) && step < self.n_steps,
            "row ({layer}, {step}) out of range for shape {:?}",
            self.shape()
        );
        let start = ((layer - 1) * self.n_steps + step) * self.n_tokens;
        &self.values[start..start + self.n_tokens]
    }

    pub fn row_f64(&self, layer: usize, step: usize) -> Vec<f64> {
        self.row(layer, step).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Pre-softmax logits of one layer, row-major `[head][step][position][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogits {
    layer: usize,
    n_heads: usize,
    n_steps: usize,
    n_positions: usize,
    n_tokens: usize,
    values: Vec<f32>,
}

impl LayerLogits {
    pub fn new(
        layer: usize,
        [n_heads, n_steps, n_positions, n_tokens]: [usize; 4],
        values: Vec<f32>,
    ) -> Result<Self, ShapeError> {
        if n_heads * n_steps * n_positions * n_tokens != values.len() {
            return Err(ShapeError {
                shape: vec![n_heads, n_steps, n_positions, n_tokens],
                actual: values.len(),
            });
        }
        Ok(Self {
            layer,
            n_heads,
            n_steps,
            n_positions,
            n_tokens,
            values,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// `[heads, steps, positions, tokens]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.n_heads, self.n_steps, self.n_positions, self.n_tokens]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Flat offset of `(head, step, position, token)`; `head` is 1-based.
    pub fn offset(&self, head: usize, step: usize, position: usize, token: usize) -> usize {
        (((head - 1) * self.n_steps + step) * self.n_positions + position) * self.n_tokens + token
    }

    /// The contiguous `[position][token]` block for a 1-based head at a step.
    pub fn block_range(&self, head: usize, step: usize) -> std::ops::Range<usize> {
        let start = self.offset(head, step, 0, 0);
        start..start + self.n_positions * self.n_tokens
    }
}

/// Optional per-head logits, at most one entry per layer, sorted by layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadLogits {
    layers: Vec<LayerLogits>,
}

impl HeadLogits {
    pub fn new(mut layers: Vec<LayerLogits>) -> Self {
        layers.sort_by_key(LayerLogits::layer);
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerLogits] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerLogits> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub manifest: TraceManifest,
    pub token_map: TokenMap,
    pub attention: AggregatedAttention,
    pub head_logits: Option<HeadLogits>,
}

/// One broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewTokens(usize),
    TokenIndexOutOfRange {
        role: &'static str,
        index: usize,
        n_tokens: usize,
    },
    ConceptIndicesEqual(usize),
    ZeroDimension(&'static str),
    TimestepCount {
        expected: usize,
        actual: usize,
    },
    TimestepsNotDecreasing {
        position: usize,
    },
    LayerGroupOutOfRange {
        group: &'static str,
        layer: usize,
        n_layers: usize,
    },
    AttentionShape {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    EntryOutOfRange {
        layer: usize,
        step: usize,
        token: usize,
        value: f32,
    },
    RowSum {
        layer: usize,
        step: usize,
        sum: f64,
    },
    LogitsLayerOutOfRange(usize),
    DuplicateLogitsLayer(usize),
    LogitsShape {
        layer: usize,
        expected: [usize; 3],
        actual: [usize; 3],
    },
    NonFiniteLogit {
        layer: usize,
        offset: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewTokens(n) => write!(f, "prompt has {n} tokens, need at least 2"),
            Self::TokenIndexOutOfRange { role, index, n_tokens } => {
                write!(f, "{role} index {index} outside 0..{n_tokens}")
            }
            Self::ConceptIndicesEqual(i) => {
                write!(f, "dominant and dominated indices are both {i}")
            }
            Self::ZeroDimension(what) => write!(f, "{what} must be positive"),
            Self::TimestepCount { expected, actual } => {
                write!(f, "expected {expected} scheduler timesteps, found {actual}")
            }
            Self::TimestepsNotDecreasing { position } => {
                write!(f, "scheduler timesteps not strictly decreasing at position {position}")
            }
            Self::LayerGroupOutOfRange { group, layer, n_layers } => {
                write!(f, "layer group {group} names layer {layer} outside 1..={n_layers}")
            }
            Self::AttentionShape { expected, actual } => {
                write!(f, "attention shape {actual:?} does not match {expected:?}")
            }
            Self::EntryOutOfRange {
                layer,
                step,
                token,
                value,
            } => write!(f, "attention ({layer},{step},{token}) = {value} outside [0, 1]"),
            Self::RowSum { layer, step, sum } => {
                write!(f, "attention row ({layer},{step}) sums to {sum}")
            }
            Self::LogitsLayerOutOfRange(l) => write!(f, "head logits for unknown layer {l}"),
            Self::DuplicateLogitsLayer(l) => write!(f, "head logits for layer {l} given twice"),
            Self::LogitsShape {
                layer,
                expected,
                actual,
            } => write!(
                f,
                "head logits for layer {layer}: (heads, steps, tokens) {actual:?} != {expected:?}"
            ),
            Self::NonFiniteLogit { layer, offset } => {
                write!(f, "head logits for layer {layer} non-finite at offset {offset}")
            }
        }
    }
}

/// Every invariant violation of `trace`; empty when it is well formed.
pub fn validate(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = &trace.manifest;
    let tm = &trace.token_map;
    let n = tm.n_tokens();

    if n < 2 {
        out.push(Violation::TooFewTokens(n));
    }
    for (role, idx) in [("dominant", tm.dominant_idx), ("dominated", tm.dominated_idx)] {
        if let Some(index) = idx.filter(|&i| i >= n) {
            out.push(Violation::TokenIndexOutOfRange {
                role,
                index,
                n_tokens: n,
            });
        }
    }
    if let (Some(a), Some(b)) = (tm.dominant_idx, tm.dominated_idx) {
        if a == b {
            out.push(Violation::ConceptIndicesEqual(a));
        }
    }

    for (what, v) in [("n_layers", m.n_layers), ("n_heads", m.n_heads), ("n_steps", m.n_steps)] {
        if v == 0 {
            out.push(Violation::ZeroDimension(what));
        }
    }
    if m.scheduler_timesteps.len() != m.n_steps {
        out.push(Violation::TimestepCount {
            expected: m.n_steps,
            actual: m.scheduler_timesteps.len(),
        });
    }
    for (k, w) in m.scheduler_timesteps.windows(2).enumerate() {
        // written to also reject NaN
        if !(w[1] < w[0]) {
            out.push(Violation::TimestepsNotDecreasing { position: k + 1 });
        }
    }
    for (group, set) in m.layer_groups.named() {
        for &layer in set.iter().filter(|&&l| l == 0 || l > m.n_layers) {
            out.push(Violation::LayerGroupOutOfRange {
                group,
                layer,
                n_layers: m.n_layers,
            });
        }
    }

    let expected = [m.n_layers, m.n_steps, n];
    let att = &trace.attention;
    if att.shape() != expected {
        out.push(Violation::AttentionShape {
            expected,
            actual: att.shape(),
        });
    } else {
        for layer in 1..=m.n_layers {
            for step in 0..m.n_steps {
                let row = att.row(layer, step);
                for (token, &value) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&value) {
                        out.push(Violation::EntryOutOfRange {
                            layer,
                            step,
                            token,
                            value,
                        });
                    }
                }
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                    out.push(Violation::RowSum { layer, step, sum });
                }
            }
        }
    }

    if let Some(hl) = &trace.head_logits {
        let mut seen = BTreeSet::new();
        for ll in hl.layers() {
            let layer = ll.layer();
            if layer == 0 || layer > m.n_layers {
                out.push(Violation::LogitsLayerOutOfRange(layer));
            }
            if !seen.insert(layer) {
                out.push(Violation::DuplicateLogitsLayer(layer));
            }
            let [h, s, _, t] = ll.shape();
            let expected = [m.n_heads, m.n_steps, n];
            if [h, s, t] != expected {
                out.push(Violation::LogitsShape {
                    layer,
                    expected,
                    actual: [h, s, t],
                });
            }
            if let Some(offset) = ll.values().iter().position(|v| !v.is_finite()) {
                out.push(Violation::NonFiniteLogit { layer, offset });
            }
        }
    }
    out
}
