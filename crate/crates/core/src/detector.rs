//! First-step focus-score detector and its threshold/layer grid search.
//!
//! A trace is flagged when the focus score of its low-resolution layers at
//! the first generation step reaches a threshold. The grid search scores
//! every (threshold, layer selector) pair on a positive and a negative
//! corpus and keeps the pair with the widest gap between the two flag rates.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::metrics::{self, FocusParams, MetricError};
use crate::model::Trace;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.010, 0.015, 0.020, 0.025];
/// Layers aggregated by the default `max` and `mean` selectors.
pub const DEFAULT_AGGREGATE_LAYERS: [usize; 3] = [8, 9, 10];
/// Detection always looks at the first generation step.
pub const DETECTION_STEP: usize = 0;

/// How per-layer focus scores are reduced to one detector value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerSelector {
    MaxOver(BTreeSet<usize>),
    MeanOver(BTreeSet<usize>),
    Single(usize),
    /// Both layers must reach the threshold: the value is the smaller score.
    Both(usize, usize),
}

impl LayerSelector {
    pub fn layers(&self) -> BTreeSet<usize> {
        match self {
            Self::MaxOver(s) | Self::MeanOver(s) => s.clone(),
            Self::Single(l) => BTreeSet::from([*l]),
            Self::Both(a, b) => BTreeSet::from([*a, *b]),
        }
    }

    fn kind_rank(&self) -> u8 {
        match self {
            Self::MaxOver(_) => 0,
            Self::MeanOver(_) => 1,
            Self::Single(_) => 2,
            Self::Both(..) => 3,
        }
    }

    /// Reduces per-layer focus scores; `focus(l)` gives layer `l`'s score.
    fn reduce(&self, mut focus: impl FnMut(usize) -> Result<f64, MetricError>) -> Result<f64, MetricError> {
        match self {
            Self::MaxOver(s) | Self::MeanOver(s) => {
                if s.is_empty() {
                    return Err(MetricError::EmptyLayerSet);
                }
                let scores = s.iter().map(|&l| focus(l)).collect::<Result<Vec<_>, _>>()?;
                Ok(match self {
                    Self::MaxOver(_) => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    _ => scores.iter().sum::<f64>() / scores.len() as f64,
                })
            }
            Self::Single(l) => focus(*l),
            Self::Both(a, b) => Ok(focus(*a)?.min(focus(*b)?)),
        }
    }
}

/// The eight selectors of the default grid, in tie-break order.
pub fn default_selectors() -> Vec<LayerSelector> {
    let set: BTreeSet<usize> = DEFAULT_AGGREGATE_LAYERS.into_iter().collect();
    vec![
        LayerSelector::MaxOver(set.clone()),
        LayerSelector::MeanOver(set),
        LayerSelector::Single(8),
        LayerSelector::Single(9),
        LayerSelector::Single(10),
        LayerSelector::Both(8, 9),
        LayerSelector::Both(8, 10),
        LayerSelector::Both(9, 10),
    ]
}

impl Ord for LayerSelector {
    fn cmp(&self, other: &Self) -> Ordering {
        let key = |s: &Self| (s.kind_rank(), s.layers().into_iter().collect::<Vec<_>>());
        key(self).cmp(&key(other))
    }
}

impl PartialOrd for LayerSelector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let is_default = |s: &BTreeSet<usize>| s.iter().copied().eq(DEFAULT_AGGREGATE_LAYERS);
        let list = |s: &BTreeSet<usize>| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match self {
            Self::MaxOver(s) if is_default(s) => f.write_str("max"),
            Self::MeanOver(s) if is_default(s) => f.write_str("mean"),
            Self::MaxOver(s) => write!(f, "max[{}]", list(s)),
            Self::MeanOver(s) => write!(f, "mean[{}]", list(s)),
            Self::Single(l) => write!(f, "L{l}"),
            Self::Both(a, b) => write!(f, "{a}&{b}"),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = String;

    /// Accepts `max`, `mean`, `max[1,2]`, `mean[7]`, `L9` (or `9`) and `9&10`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("bad layer selector {s:?}");
        let layer = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let set = |body: &str| -> Result<BTreeSet<usize>, String> {
            let inner = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(bad)?;
            let layers = inner.split(',').map(layer).collect::<Result<BTreeSet<_>, _>>()?;
            if layers.is_empty() {
                return Err(bad());
            }
            Ok(layers)
        };
        let lower = s.to_ascii_lowercase();
        let default_set = || DEFAULT_AGGREGATE_LAYERS.into_iter().collect();
        if lower == "max" {
            Ok(Self::MaxOver(default_set()))
        } else if lower == "mean" {
            Ok(Self::MeanOver(default_set()))
        } else if let Some(rest) = lower.strip_prefix("max") {
            Ok(Self::MaxOver(set(rest)?))
        } else if let Some(rest) = lower.strip_prefix("mean") {
            Ok(Self::MeanOver(set(rest)?))
        } else if let Some((a, b)) = lower.split_once('&') {
            let (a, b) = (layer(a)?, layer(b)?);
            if a == b {
                return Err(bad());
            }
            Ok(Self::Both(a.min(b), a.max(b)))
        } else {
            Ok(Self::Single(layer(lower.strip_prefix('l').unwrap_or(&lower))?))
        }
    }
}

impl Serialize for LayerSelector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSelector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub selector: LayerSelector,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLDS[0],
            selector: LayerSelector::Both(9, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("grid has no entries")]
    EmptyGrid,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("rate table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub flagged: bool,
    pub value: f64,
    /// Token with the most attention over the selector's layers.
    pub peak: usize,
}

/// Selector-reduced focus score at the first step.
pub fn detector_value(trace: &Trace, selector: &LayerSelector, params: FocusParams) -> Result<f64, MetricError> {
    selector.reduce(|l| {
        let layers = BTreeSet::from([l]);
        metrics::focus_score(&metrics::mean_row(trace, &layers, DETECTION_STEP)?, params)
    })
}

pub fn detect(trace: &Trace, config: &DetectorConfig, params: FocusParams) -> Result<Detection, DetectorError> {
    if !(config.threshold > 0.0) {
        return Err(DetectorError::BadThreshold(config.threshold));
    }
    let value = detector_value(trace, &config.selector, params)?;
    let peak = metrics::peak_token(trace, &config.selector.layers(), DETECTION_STEP)?;
    Ok(Detection {
        flagged: value >= config.threshold,
        value,
        peak,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub threshold: f64,
    pub selector: LayerSelector,
    /// Fraction of the positive corpus flagged.
    pub rate_pos: f64,
    /// Fraction of the negative corpus flagged.
    pub rate_neg: f64,
    /// `rate_pos - rate_neg`.
    pub gap: f64,
}

impl GridEntry {
    pub fn new(threshold: f64, selector: LayerSelector, rate_pos: f64, rate_neg: f64) -> Self {
        Self {
            threshold,
            selector,
            rate_pos,
            rate_neg,
            gap: rate_pos - rate_neg,
        }
    }

    pub fn config(&self) -> DetectorConfig {
        DetectorConfig {
            threshold: self.threshold,
            selector: self.selector.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct GridResult {
    pub entries: Vec<GridEntry>,
}

/// Detector value of every trace under every selector, `[trace][selector]`.
fn value_matrix(
    corpus: &[Trace],
    selectors: &[LayerSelector],
    params: FocusParams,
) -> Result<Vec<Vec<f64>>, MetricError> {
    corpus
        .par_iter()
        .map(|t| selectors.iter().map(|s| detector_value(t, s, params)).collect())
        .collect()
}

fn flag_rate(values: &[Vec<f64>], selector: usize, threshold: f64) -> f64 {
    let hits = values.iter().filter(|row| row[selector] >= threshold).count();
    hits as f64 / values.len() as f64
}

/// Scores every (threshold, selector) pair, threshold-major, selectors in
/// the order given.
pub fn grid_eval(
    pos: &[Trace],
    neg: &[Trace],
    thresholds: &[f64],
    selectors: &[LayerSelector],
    params: FocusParams,
) -> Result<GridResult, DetectorError> {
    if pos.is_empty() {
        return Err(DetectorError::EmptyCorpus("positive"));
    }
    if neg.is_empty() {
        return Err(DetectorError::EmptyCorpus("negative"));
    }
    if let Some(&t) = thresholds.iter().find(|&&t| !(t > 0.0)) {
        return Err(DetectorError::BadThreshold(t));
    }
    let pos_values = value_matrix(pos, selectors, params)?;
    let neg_values = value_matrix(neg, selectors, params)?;
    let mut entries = Vec::with_capacity(thresholds.len() * selectors.len());
    for &threshold in thresholds {
        for (k, selector) in selectors.iter().enumerate() {
            entries.push(GridEntry::new(
                threshold,
                selector.clone(),
                flag_rate(&pos_values, k, threshold),
                flag_rate(&neg_values, k, threshold),
            ));
        }
    }
    Ok(GridResult { entries })
}

/// The entry with the largest gap; ties go to the lower threshold, then to
/// the earlier selector (max, mean, singles, pairs; lower layers first).
pub fn select_entry(grid: &GridResult) -> Result<&GridEntry, DetectorError> {
    grid.entries
        .iter()
        .min_by(|a, b| {
            b.gap
                .total_cmp(&a.gap)
                .then(a.threshold.total_cmp(&b.threshold))
                .then_with(|| a.selector.cmp(&b.selector))
        })
        .ok_or(DetectorError::EmptyGrid)
}

pub fn select_config(grid: &GridResult) -> Result<DetectorConfig, DetectorError> {
    select_entry(grid).map(GridEntry::config)
}

#[derive(Debug, Deserialize)]
struct RateRow {
    threshold: f64,
    selector: String,
    rate_pos: f64,
    rate_neg: f64,
}

/// Reads a precomputed rate table with columns
/// `threshold,selector,rate_pos,rate_neg` (a `gap` column, if present, is
/// recomputed rather than trusted). Rates are fractions in [0, 1].
pub fn read_rate_table(input: impl Read) -> Result<GridResult, DetectorError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut entries = Vec::new();
    for row in rdr.deserialize::<RateRow>() {
        let row = row.map_err(|e| DetectorError::Table(e.to_string()))?;
        let selector = row.selector.parse().map_err(DetectorError::Table)?;
        for r in [row.rate_pos, row.rate_neg] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DetectorError::Table(format!("rate {r} outside [0, 1]")));
            }
        }
        entries.push(GridEntry::new(row.threshold, selector, row.rate_pos, row.rate_neg));
    }
    Ok(GridResult { entries })
}
