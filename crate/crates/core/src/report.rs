//! Result tables and their JSON / CSV serialization.
//!
//! Every report serializes to pretty JSON with fields in declaration order,
//! or to a single CSV table. Floats use the shortest representation that
//! round-trips, so both formats parse back to identical numbers.

use std::collections::BTreeSet;
use std::fmt::Display;

use serde::Serialize;

use crate::ablation::{self, AblationError, AblationRecord, OutcomeLabel, Phenomenon};
use crate::detector::{Detection, DetectorConfig, GridEntry, GridResult};
use crate::metrics::{self, FocusParams, MetricError};
use crate::model::Trace;
use crate::scoring::{self, Boundary, PromptImageTally, ScoringError};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("serialization failed: {0}")]
    SerializationFailure(String),
}

/// A result that can be emitted as JSON or as one CSV table.
pub trait Report: Serialize {
    fn csv_header(&self) -> Vec<&'static str>;
    fn csv_rows(&self) -> Vec<Vec<String>>;
}

pub fn emit_report<R: Report>(report: &R, format: Format) -> Result<Vec<u8>, ReportError> {
    match format {
        Format::Json => {
            let mut out =
                serde_json::to_vec_pretty(report).map_err(|e| ReportError::SerializationFailure(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        Format::Csv => {
            let fail = |e: csv::Error| ReportError::SerializationFailure(e.to_string());
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(report.csv_header()).map_err(fail)?;
            for row in report.csv_rows() {
                w.write_record(&row).map_err(fail)?;
            }
            w.into_inner()
                .map_err(|e| ReportError::SerializationFailure(e.to_string()))
        }
    }
}

fn cell(v: impl Display) -> String {
    v.to_string()
}

fn opt_cell<T: Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn join_heads(heads: &BTreeSet<usize>) -> String {
    heads.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

// ---------------------------------------------------------------- score

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub prompt_id: String,
    pub image_id: String,
    pub c1: u32,
    pub c2: u32,
    pub n: u32,
    pub score: f64,
    pub is_dvd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptScore {
    pub prompt_id: String,
    pub n_images: usize,
    pub n_dvd: usize,
    pub mean: f64,
    pub median: f64,
    /// Whether the prompt's image set passes the benchmark filter.
    pub selected: bool,
}

/// Five-number summary of per-prompt mean scores, for box plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl BoxSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q25: stats::quantile_sorted(&v, 0.25),
            median: stats::quantile_sorted(&v, 0.5),
            q75: stats::quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub threshold: f64,
    pub min_count: usize,
    pub boundary: Boundary,
    pub images: Vec<ImageScore>,
    pub prompts: Vec<PromptScore>,
    pub prompt_mean_distribution: Option<BoxSummary>,
}

pub fn score_report(
    rows: &[PromptImageTally],
    threshold: f64,
    min_count: usize,
    boundary: Boundary,
) -> Result<ScoreReport, ScoringError> {
    let mut images = Vec::with_capacity(rows.len());
    for r in rows {
        let score = scoring::dvd_score(r.tally())?;
        images.push(ImageScore {
            prompt_id: r.prompt_id.clone(),
            image_id: r.image_id.clone(),
            c1: r.c1,
            c2: r.c2,
            n: r.n,
            score,
            is_dvd: boundary.passes(score, threshold),
        });
    }
    let by_prompt = scoring::scores_by_prompt(rows)?;
    let summaries = scoring::prompt_summary(&by_prompt)?;
    let mut prompts = Vec::with_capacity(by_prompt.len());
    for (prompt_id, scores) in &by_prompt {
        let s = summaries[prompt_id];
        prompts.push(PromptScore {
            prompt_id: prompt_id.clone(),
            n_images: scores.len(),
            n_dvd: scores.iter().filter(|&&x| boundary.passes(x, threshold)).count(),
            mean: s.mean,
            median: s.median,
            selected: scoring::image_set_filter_with(scores, min_count, threshold, boundary)?,
        });
    }
    let means: Vec<f64> = prompts.iter().map(|p| p.mean).collect();
    Ok(ScoreReport {
        threshold,
        min_count,
        boundary,
        images,
        prompt_mean_distribution: BoxSummary::of(&means),
        prompts,
    })
}

impl Report for ScoreReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec![
            "prompt_id",
            "image_id",
            "c1",
            "c2",
            "n",
            "score",
            "is_dvd",
            "prompt_mean",
            "prompt_median",
            "prompt_selected",
        ]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.images
            .iter()
            .map(|i| {
                let p = self
                    .prompts
                    .iter()
                    .find(|p| p.prompt_id == i.prompt_id)
                    .expect("prompt summarized");
                vec![
                    i.prompt_id.clone(),
                    i.image_id.clone(),
                    cell(i.c1),
                    cell(i.c2),
                    cell(i.n),
                    cell(i.score),
                    cell(i.is_dvd),
                    cell(p.mean),
                    cell(p.median),
                    cell(p.selected),
                ]
            })
            .collect()
    }
}

// -------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDynamics {
    pub token_idx: usize,
    pub token: String,
    pub layers: BTreeSet<usize>,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub binned_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub source: String,
    pub step: usize,
    /// Focus score of layers 1..=L at `step`.
    pub focus_profile: Vec<f64>,
    pub peak_layers: BTreeSet<usize>,
    pub peak_token_idx: usize,
    pub peak_token: String,
    pub bin_size: usize,
    pub dominant: Option<TokenDynamics>,
    pub dominated: Option<TokenDynamics>,
}

/// Layer sets used to follow the two concept tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub step: usize,
    pub bin_size: usize,
    pub focus: FocusParams,
    /// Layers for the dominant token and the peak; defaults to the trace's
    /// low-resolution group.
    pub dominant_layers: Option<BTreeSet<usize>>,
    /// Layers for the dominated token; defaults to the mid group.
    pub dominated_layers: Option<BTreeSet<usize>>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            step: 0,
            bin_size: 10,
            focus: FocusParams::default(),
            dominant_layers: None,
            dominated_layers: None,
        }
    }
}

fn token_dynamics(
    trace: &Trace,
    layers: &BTreeSet<usize>,
    token: usize,
    bin_size: usize,
) -> Result<TokenDynamics, MetricError> {
    let series = metrics::deviation_series(trace, layers, token)?;
    let delta = if series.alpha.len() >= 2 {
        metrics::delta_series(&series)?
    } else {
        Vec::new()
    };
    Ok(TokenDynamics {
        token_idx: token,
        token: trace.token_map.tokens[token].clone(),
        layers: layers.clone(),
        binned_delta: metrics::bin_deltas(&delta, bin_size),
        alpha: series.alpha,
        delta,
    })
}

pub fn analyze_report(source: &str, trace: &Trace, opts: &AnalyzeOptions) -> Result<AnalyzeReport, MetricError> {
    let groups = &trace.manifest.layer_groups;
    let dominant_layers = opts.dominant_layers.clone().unwrap_or_else(|| groups.lowres.clone());
    let dominated_layers = opts.dominated_layers.clone().unwrap_or_else(|| groups.mid.clone());
    let focus_profile = metrics::layer_focus_profile(trace, opts.step, opts.focus)?;
    let peak = metrics::peak_token(trace, &dominant_layers, opts.step)?;
    let dominant = trace
        .token_map
        .dominant_idx
        .map(|i| token_dynamics(trace, &dominant_layers, i, opts.bin_size))
        .transpose()?;
    let dominated = trace
        .token_map
        .dominated_idx
        .map(|i| token_dynamics(trace, &dominated_layers, i, opts.bin_size))
        .transpose()?;
    Ok(AnalyzeReport {
        source: source.to_string(),
        step: opts.step,
        focus_profile,
        peak_token: trace.token_map.tokens[peak].clone(),
        peak_token_idx: peak,
        peak_layers: dominant_layers,
        bin_size: opts.bin_size,
        dominant,
        dominated,
    })
}

impl Report for AnalyzeReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["series", "token_idx", "index", "value"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (i, v) in self.focus_profile.iter().enumerate() {
            rows.push(vec!["focus".into(), String::new(), cell(i + 1), cell(v)]);
        }
        rows.push(vec![
            "peak".into(),
            cell(self.peak_token_idx),
            cell(self.step),
            cell(self.peak_token_idx),
        ]);
        for (role, d) in [("dominant", &self.dominant), ("dominated", &self.dominated)] {
            let Some(d) = d else { continue };
            for (name, values) in [
                ("alpha", &d.alpha),
                ("delta", &d.delta),
                ("binned_delta", &d.binned_delta),
            ] {
                for (i, v) in values.iter().enumerate() {
                    rows.push(vec![format!("{role}_{name}"), cell(d.token_idx), cell(i), cell(v)]);
                }
            }
        }
        rows
    }
}

// --------------------------------------------------------------- detect

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectRow {
    pub source: String,
    pub flagged: bool,
    pub value: f64,
    pub peak: usize,
    pub peak_token: String,
}

impl DetectRow {
    pub fn new(source: &str, trace: &Trace, d: Detection) -> Self {
        Self {
            source: source.to_string(),
            flagged: d.flagged,
            value: d.value,
            peak: d.peak,
            peak_token: trace.token_map.tokens[d.peak].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectReport {
    pub config: DetectorConfig,
    pub flag_rate: Option<f64>,
    pub traces: Vec<DetectRow>,
}

impl DetectReport {
    pub fn new(config: DetectorConfig, traces: Vec<DetectRow>) -> Self {
        let flag_rate =
            (!traces.is_empty()).then(|| traces.iter().filter(|t| t.flagged).count() as f64 / traces.len() as f64);
        Self {
            config,
            flag_rate,
            traces,
        }
    }
}

impl Report for DetectReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["source", "flagged", "value", "peak", "peak_token"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.traces
            .iter()
            .map(|t| {
                vec![
                    t.source.clone(),
                    cell(t.flagged),
                    cell(t.value),
                    cell(t.peak),
                    t.peak_token.clone(),
                ]
            })
            .collect()
    }
}

// ----------------------------------------------------------------- grid

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub entries: Vec<GridEntry>,
    pub selected: Option<GridEntry>,
}

impl GridReport {
    pub fn new(grid: GridResult) -> Self {
        let selected = crate::detector::select_entry(&grid).ok().cloned();
        Self {
            entries: grid.entries,
            selected,
        }
    }
}

impl Report for GridReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["threshold", "selector", "rate_pos", "rate_neg", "gap", "selected"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                vec![
                    cell(e.threshold),
                    cell(&e.selector),
                    cell(e.rate_pos),
                    cell(e.rate_neg),
                    cell(e.gap),
                    cell(self.selected.as_ref() == Some(e)),
                ]
            })
            .collect()
    }
}

// ------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledRecord {
    pub prompt_id: String,
    pub phenomenon: Phenomenon,
    pub layer: usize,
    pub heads: BTreeSet<usize>,
    pub label: OutcomeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRatio {
    pub phenomenon: Phenomenon,
    pub layer: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusRatio {
    pub phenomenon: Phenomenon,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutcomes {
    pub phenomenon: Phenomenon,
    pub layer: usize,
    pub mitigated: f64,
    pub unchanged: f64,
    pub others: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub records: Vec<LabeledRecord>,
    /// Per-layer share of prompts mitigated by some single head.
    pub single_head: Vec<LayerRatio>,
    /// Share of prompts mitigated by some single head in any layer.
    pub single_head_any_layer: Vec<CorpusRatio>,
    /// Per-layer outcome proportions of head-pair ablations.
    pub multi_head: Vec<LayerOutcomes>,
}

/// Labels every record and aggregates single-head and head-pair records
/// separately per phenomenon. Records ablating more than two heads are
/// labelled but not aggregated.
pub fn ablation_report(records: &[AblationRecord]) -> Result<AblationReport, AblationError> {
    let labeled = records
        .iter()
        .map(|r| {
            Ok(LabeledRecord {
                prompt_id: r.prompt_id.clone(),
                phenomenon: r.phenomenon,
                layer: r.layer,
                heads: r.heads.clone(),
                label: ablation::classify(r)?,
            })
        })
        .collect::<Result<Vec<_>, AblationError>>()?;

    let mut single_head = Vec::new();
    let mut single_head_any_layer = Vec::new();
    let mut multi_head = Vec::new();
    for phenomenon in [Phenomenon::Dvd, Phenomenon::Memorization] {
        let subset = |k: usize| -> Vec<AblationRecord> {
            records
                .iter()
                .filter(|r| r.phenomenon == phenomenon && r.heads.len() == k)
                .cloned()
                .collect()
        };
        let singles = subset(1);
        if !singles.is_empty() {
            for (layer, ratio) in ablation::layer_mitigation_ratio(&singles)? {
                single_head.push(LayerRatio {
                    phenomenon,
                    layer,
                    ratio,
                });
            }
            let ratio = ablation::any_layer_mitigation_ratio(&singles)?;
            single_head_any_layer.push(CorpusRatio { phenomenon, ratio });
        }
        let pairs = subset(2);
        if !pairs.is_empty() {
            for (layer, r) in ablation::multi_head_ratios(&pairs)? {
                multi_head.push(LayerOutcomes {
                    phenomenon,
                    layer,
                    mitigated: r.mitigated,
                    unchanged: r.unchanged,
                    others: r.others,
                });
            }
        }
    }
    Ok(AblationReport {
        records: labeled,
        single_head,
        single_head_any_layer,
        multi_head,
    })
}

impl Report for AblationReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["table", "phenomenon", "prompt_id", "layer", "heads", "outcome", "value"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for r in &self.records {
            rows.push(vec![
                "label".into(),
                cell(r.phenomenon),
                r.prompt_id.clone(),
                cell(r.layer),
                join_heads(&r.heads),
                cell(r.label),
                String::new(),
            ]);
        }
        for r in &self.single_head {
            rows.push(vec![
                "single_head".into(),
                cell(r.phenomenon),
                String::new(),
                cell(r.layer),
                String::new(),
                "mitigated".into(),
                cell(r.ratio),
            ]);
        }
        for r in &self.single_head_any_layer {
            rows.push(vec![
                "single_head_any_layer".into(),
                cell(r.phenomenon),
                String::new(),
                String::new(),
                String::new(),
                "mitigated".into(),
                cell(r.ratio),
            ]);
        }
        for r in &self.multi_head {
            for (outcome, v) in [
                ("mitigated", r.mitigated),
                ("unchanged", r.unchanged),
                ("others", r.others),
            ] {
                rows.push(vec![
                    "multi_head".into(),
                    cell(r.phenomenon),
                    String::new(),
                    cell(r.layer),
                    String::new(),
                    outcome.into(),
                    cell(v),
                ]);
            }
        }
        rows
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthRow {
    pub path: String,
    pub label: Option<String>,
    pub model_id: String,
    pub dominant_idx: Option<usize>,
    pub dominated_idx: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthReport {
    pub written: Vec<SynthRow>,
}

impl Report for SynthReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["path", "label", "model_id", "dominant_idx", "dominated_idx"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.written
            .iter()
            .map(|r| {
                vec![
                    r.path.clone(),
                    r.label.clone().unwrap_or_default(),
                    r.model_id.clone(),
                    opt_cell(r.dominant_idx),
                    opt_cell(r.dominated_idx),
                ]
            })
            .collect()
    }
}
