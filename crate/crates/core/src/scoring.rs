//! DvD Score from VQA yes-counts, the DvD decision and benchmark filtering.
//!
//! For a two-concept prompt, `c1` and `c2` count "yes" answers to `n`
//! presence questions about the dominant and the dominated concept. The
//! score `c1 * (n - c2) / n^2 * 100` is high only when the first concept
//! shows up and the second does not.

use std::io::Read;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::stats;

/// Default score at or above which an image counts as DvD.
pub const DVD_THRESHOLD: f64 = 36.0;
/// Default number of images out of a prompt's set that must be DvD.
pub const MIN_DVD_IMAGES: usize = 7;
/// Default number of VQA questions per concept.
pub const QUESTIONS_PER_CONCEPT: u32 = 5;

/// How a score is compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// `score >= threshold`
    Inclusive,
    /// `score > threshold`
    Exclusive,
}

impl Boundary {
    pub fn passes(self, score: f64, threshold: f64) -> bool {
        match self {
            Self::Inclusive => score >= threshold,
            Self::Exclusive => score > threshold,
        }
    }
}

/// Comparison used throughout unless a caller asks otherwise.
pub const BOUNDARY: Boundary = Boundary::Inclusive;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("invalid tally c1={c1} c2={c2} n={n}: need n >= 1 and counts in 0..=n")]
    InvalidTally { c1: u32, c2: u32, n: u32 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for ScoringError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaTally {
    pub c1: u32,
    pub c2: u32,
    pub n: u32,
}

impl VqaTally {
    pub fn new(c1: u32, c2: u32, n: u32) -> Result<Self, ScoringError> {
        let t = Self { c1, c2, n };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), ScoringError> {
        if self.n == 0 || self.c1 > self.n || self.c2 > self.n {
            return Err(ScoringError::InvalidTally {
                c1: self.c1,
                c2: self.c2,
                n: self.n,
            });
        }
        Ok(())
    }
}

/// `c1 * (n - c2) / n^2 * 100`, in [0, 100].
pub fn dvd_score(tally: VqaTally) -> Result<f64, ScoringError> {
    tally.check()?;
    let num = u64::from(tally.c1) * u64::from(tally.n - tally.c2) * 100;
    let den = u64::from(tally.n) * u64::from(tally.n);
    Ok(num as f64 / den as f64)
}

pub fn is_dvd(score: f64, threshold: f64) -> bool {
    BOUNDARY.passes(score, threshold)
}

/// Whether a prompt's image set qualifies: at least `min_count` of its
/// scores clear `threshold`.
pub fn image_set_filter(scores: &[f64], min_count: usize, threshold: f64) -> Result<bool, ScoringError> {
    image_set_filter_with(scores, min_count, threshold, BOUNDARY)
}

pub fn image_set_filter_with(
    scores: &[f64],
    min_count: usize,
    threshold: f64,
    boundary: Boundary,
) -> Result<bool, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::EmptyInput("image scores"));
    }
    let hits = scores.iter().filter(|&&s| boundary.passes(s, threshold)).count();
    Ok(hits >= min_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PromptSummary {
    pub mean: f64,
    pub median: f64,
}

/// Mean and median score per prompt, in the input's prompt order.
pub fn prompt_summary(
    per_image_scores: &IndexMap<String, Vec<f64>>,
) -> Result<IndexMap<String, PromptSummary>, ScoringError> {
    per_image_scores
        .iter()
        .map(|(prompt, scores)| {
            if scores.is_empty() {
                return Err(ScoringError::EmptyInput("prompt with no image scores"));
            }
            let summary = PromptSummary {
                mean: stats::mean(scores),
                median: stats::median(scores),
            };
            Ok((prompt.clone(), summary))
        })
        .collect()
}

/// One row of a container's `vqa.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTally {
    pub image_id: String,
    pub c1: u32,
    pub c2: u32,
    pub n: u32,
}

impl ImageTally {
    pub fn tally(&self) -> VqaTally {
        VqaTally {
            c1: self.c1,
            c2: self.c2,
            n: self.n,
        }
    }
}

/// One row of a standalone score CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptImageTally {
    pub prompt_id: String,
    pub image_id: String,
    pub c1: u32,
    pub c2: u32,
    pub n: u32,
}

impl PromptImageTally {
    pub fn tally(&self) -> VqaTally {
        VqaTally {
            c1: self.c1,
            c2: self.c2,
            n: self.n,
        }
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(input: impl Read) -> Result<Vec<T>, ScoringError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let rows = rdr.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn read_image_tallies(bytes: &[u8]) -> Result<Vec<ImageTally>, ScoringError> {
    let rows: Vec<ImageTally> = read_rows(bytes)?;
    for r in &rows {
        r.tally().check()?;
    }
    Ok(rows)
}

pub fn write_image_tallies(rows: &[ImageTally]) -> Result<Vec<u8>, ScoringError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["image_id", "c1", "c2", "n"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ScoringError::Csv(e.to_string()))
}

pub fn read_prompt_tallies(input: impl Read) -> Result<Vec<PromptImageTally>, ScoringError> {
    let rows: Vec<PromptImageTally> = read_rows(input)?;
    for r in &rows {
        r.tally().check()?;
    }
    Ok(rows)
}

/// Groups per-image scores by prompt, preserving first-appearance order.
pub fn scores_by_prompt(rows: &[PromptImageTally]) -> Result<IndexMap<String, Vec<f64>>, ScoringError> {
    let mut out: IndexMap<String, Vec<f64>> = IndexMap::new();
    for r in rows {
        out.entry(r.prompt_id.clone()).or_default().push(dvd_score(r.tally())?);
    }
    Ok(out)
}
