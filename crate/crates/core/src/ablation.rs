//! Head ablation on pre-softmax logits, outcome labelling and outcome ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::LayerLogits;
use crate::scoring::DVD_THRESHOLD;

pub const DEFAULT_ABLATION_SCALE: f64 = 1e-5;

/// DvD: LPIPS must exceed this for a change to count.
pub const DVD_LPIPS_MIN: f64 = 0.5;
/// Memorization: SSCD must fall below this.
pub const MEM_SSCD_MAX: f64 = 0.5;
/// Memorization: LPIPS must exceed this.
pub const MEM_LPIPS_MIN: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AblationError {
    #[error("ablation spec targets layer {spec} but logits are for layer {logits}")]
    LayerMismatch { spec: usize, logits: usize },
    #[error("head {head} outside 1..={n_heads}")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("step {step} out of range for {n_steps} steps")]
    StepOutOfRange { step: usize, n_steps: usize },
    #[error("invalid ablation spec: {0}")]
    InvalidSpec(String),
    #[error("record {prompt_id}: missing {metric}")]
    MissingMetric { prompt_id: String, metric: &'static str },
    #[error("record {prompt_id}: expected a {expected} record")]
    WrongPhenomenon { prompt_id: String, expected: Phenomenon },
    #[error("record {prompt_id} ablates {heads} heads, expected a single head")]
    NotSingleHead { prompt_id: String, heads: usize },
    #[error("record {prompt_id} ablates {heads} heads, expected a head pair")]
    NotHeadPair { prompt_id: String, heads: usize },
    #[error("no records to aggregate")]
    EmptyGroup,
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub layer: usize,
    /// Generation-order step; 0 is the first denoising step.
    pub step: usize,
    /// 1-based head ids.
    pub heads: BTreeSet<usize>,
    pub scale: f64,
}

impl AblationSpec {
    pub fn new(layer: usize, step: usize, heads: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layer,
            step,
            heads: heads.into_iter().collect(),
            scale: DEFAULT_ABLATION_SCALE,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// Scales the logits of the targeted heads at the targeted step by
/// `spec.scale`. Every other entry is copied through untouched.
pub fn ablate_logits(logits: &LayerLogits, spec: &AblationSpec) -> Result<LayerLogits, AblationError> {
    if spec.layer != logits.layer() {
        return Err(AblationError::LayerMismatch {
            spec: spec.layer,
            logits: logits.layer(),
        });
    }
    if spec.heads.is_empty() {
        return Err(AblationError::InvalidSpec("no heads selected".into()));
    }
    if !(spec.scale > 0.0) || !spec.scale.is_finite() {
        return Err(AblationError::InvalidSpec(format!(
            "scale must be positive, got {}",
            spec.scale
        )));
    }
    let [n_heads, n_steps, _, _] = logits.shape();
    if let Some(&head) = spec.heads.iter().find(|&&h| h == 0 || h > n_heads) {
        return Err(AblationError::HeadOutOfRange { head, n_heads });
    }
    if spec.step >= n_steps {
        return Err(AblationError::StepOutOfRange {
            step: spec.step,
            n_steps,
        });
    }
    let mut out = logits.clone();
    for &head in &spec.heads {
        let range = out.block_range(head, spec.step);
        for v in &mut out.values_mut()[range] {
            *v = (f64::from(*v) * spec.scale) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phenomenon {
    Dvd,
    Memorization,
}

impl fmt::Display for Phenomenon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dvd => "dvd",
            Self::Memorization => "memorization",
        })
    }
}

impl FromStr for Phenomenon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dvd" => Ok(Self::Dvd),
            "memorization" | "memorisation" => Ok(Self::Memorization),
            other => Err(format!("unknown phenomenon {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLabel {
    Mitigated,
    Unchanged,
    Others,
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mitigated => "mitigated",
            Self::Unchanged => "unchanged",
            Self::Others => "others",
        })
    }
}

/// One ablated generation with its externally computed metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRecord {
    pub prompt_id: String,
    pub phenomenon: Phenomenon,
    pub layer: usize,
    pub heads: BTreeSet<usize>,
    pub lpips: Option<f64>,
    pub sscd: Option<f64>,
    pub dvd_score: Option<f64>,
    /// Set by an external quality check when the image is corrupted.
    pub degraded: bool,
}

fn require(record: &AblationRecord, value: Option<f64>, metric: &'static str) -> Result<f64, AblationError> {
    value.ok_or_else(|| AblationError::MissingMetric {
        prompt_id: record.prompt_id.clone(),
        metric,
    })
}

fn expect_phenomenon(record: &AblationRecord, expected: Phenomenon) -> Result<(), AblationError> {
    if record.phenomenon != expected {
        return Err(AblationError::WrongPhenomenon {
            prompt_id: record.prompt_id.clone(),
            expected,
        });
    }
    Ok(())
}

/// Mitigated iff LPIPS > 0.5 and the new DvD Score < 36. A degraded image is
/// always `Others`.
pub fn classify_dvd(record: &AblationRecord) -> Result<OutcomeLabel, AblationError> {
    expect_phenomenon(record, Phenomenon::Dvd)?;
    let lpips = require(record, record.lpips, "lpips")?;
    let score = require(record, record.dvd_score, "dvd_score")?;
    Ok(if record.degraded {
        OutcomeLabel::Others
    } else if lpips > DVD_LPIPS_MIN && score < DVD_THRESHOLD {
        OutcomeLabel::Mitigated
    } else {
        OutcomeLabel::Unchanged
    })
}

/// Mitigated iff SSCD < 0.5 and LPIPS > 0.6. A degraded image is always
/// `Others`.
pub fn classify_memorization(record: &AblationRecord) -> Result<OutcomeLabel, AblationError> {
    expect_phenomenon(record, Phenomenon::Memorization)?;
    let sscd = require(record, record.sscd, "sscd")?;
    let lpips = require(record, record.lpips, "lpips")?;
    Ok(if record.degraded {
        OutcomeLabel::Others
    } else if sscd < MEM_SSCD_MAX && lpips > MEM_LPIPS_MIN {
        OutcomeLabel::Mitigated
    } else {
        OutcomeLabel::Unchanged
    })
}

pub fn classify(record: &AblationRecord) -> Result<OutcomeLabel, AblationError> {
    match record.phenomenon {
        Phenomenon::Dvd => classify_dvd(record),
        Phenomenon::Memorization => classify_memorization(record),
    }
}

/// Per layer: share of prompts with at least one mitigating single-head
/// ablation at that layer among prompts that have any record there.
pub fn layer_mitigation_ratio(records: &[AblationRecord]) -> Result<BTreeMap<usize, f64>, AblationError> {
    let mut seen: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    let mut mitigated: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        check_single(r)?;
        seen.entry(r.layer).or_default().insert(&r.prompt_id);
        if classify(r)? == OutcomeLabel::Mitigated {
            mitigated.entry(r.layer).or_default().insert(&r.prompt_id);
        }
    }
    Ok(seen
        .into_iter()
        .map(|(layer, prompts)| {
            let hits = mitigated.get(&layer).map_or(0, BTreeSet::len);
            (layer, hits as f64 / prompts.len() as f64)
        })
        .collect())
}

/// Share of prompts mitigated by at least one single head in any layer.
pub fn any_layer_mitigation_ratio(records: &[AblationRecord]) -> Result<f64, AblationError> {
    if records.is_empty() {
        return Err(AblationError::EmptyGroup);
    }
    let mut seen = BTreeSet::new();
    let mut mitigated = BTreeSet::new();
    for r in records {
        check_single(r)?;
        seen.insert(r.prompt_id.as_str());
        if classify(r)? == OutcomeLabel::Mitigated {
            mitigated.insert(r.prompt_id.as_str());
        }
    }
    Ok(mitigated.len() as f64 / seen.len() as f64)
}

fn check_single(r: &AblationRecord) -> Result<(), AblationError> {
    if r.heads.len() != 1 {
        return Err(AblationError::NotSingleHead {
            prompt_id: r.prompt_id.clone(),
            heads: r.heads.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutcomeRatios {
    pub mitigated: f64,
    pub unchanged: f64,
    pub others: f64,
}

impl OutcomeRatios {
    pub fn sum(&self) -> f64 {
        self.mitigated + self.unchanged + self.others
    }
}

/// Per layer, the mean over prompts of each outcome's share among that
/// prompt's head-pair ablations.
pub fn multi_head_ratios(records: &[AblationRecord]) -> Result<BTreeMap<usize, OutcomeRatios>, AblationError> {
    if records.is_empty() {
        return Err(AblationError::EmptyGroup);
    }
    // layer -> prompt -> [mitigated, unchanged, others]
    let mut counts: BTreeMap<usize, BTreeMap<&str, [usize; 3]>> = BTreeMap::new();
    for r in records {
        if r.heads.len() != 2 {
            return Err(AblationError::NotHeadPair {
                prompt_id: r.prompt_id.clone(),
                heads: r.heads.len(),
            });
        }
        let slot = match classify(r)? {
            OutcomeLabel::Mitigated => 0,
            OutcomeLabel::Unchanged => 1,
            OutcomeLabel::Others => 2,
        };
        counts.entry(r.layer).or_default().entry(&r.prompt_id).or_default()[slot] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(layer, prompts)| {
            let mut acc = [0.0f64; 3];
            for c in prompts.values() {
                let total = (c[0] + c[1] + c[2]) as f64;
                for (a, &m) in acc.iter_mut().zip(c) {
                    *a += m as f64 / total;
                }
            }
            let p = prompts.len() as f64;
            (
                layer,
                OutcomeRatios {
                    mitigated: acc[0] / p,
                    unchanged: acc[1] / p,
                    others: acc[2] / p,
                },
            )
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    prompt_id: String,
    phenomenon: String,
    layer: usize,
    heads: String,
    sscd: Option<f64>,
    lpips: Option<f64>,
    dvd_score: Option<f64>,
    degraded: String,
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("not a boolean: {other:?}")),
    }
}

/// Reads records from CSV with columns
/// `prompt_id,phenomenon,layer,heads,sscd,lpips,dvd_score,degraded`, where
/// `heads` is semicolon-joined and empty metric cells mean "not measured".
pub fn read_records(input: impl Read) -> Result<Vec<AblationRecord>, AblationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RawRecord>().enumerate() {
        let row = row.map_err(|e| AblationError::Csv(e.to_string()))?;
        let line = |msg: String| AblationError::Csv(format!("record {}: {msg}", i + 1));
        let heads = row
            .heads
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|e| line(format!("head {s:?}: {e}"))))
            .collect::<Result<BTreeSet<_>, _>>()?;
        out.push(AblationRecord {
            prompt_id: row.prompt_id,
            phenomenon: row.phenomenon.parse().map_err(line)?,
            layer: row.layer,
            heads,
            lpips: row.lpips,
            sscd: row.sscd,
            dvd_score: row.dvd_score,
            degraded: parse_bool(&row.degraded).map_err(line)?,
        });
    }
    Ok(out)
}
