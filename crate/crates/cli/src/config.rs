//! `--config` files: flat TOML key/value pairs. Every key is optional and
//! unknown keys are rejected.
//!
//! ```toml
//! dvd_threshold = 36.0
//! min_count = 7
//! boundary = "inclusive"          # or "exclusive"
//! focus_epsilon = 1e-8
//! ablate_scale = 1e-5
//! step = 0
//! bin_size = 10
//! dominant_layers = [8, 9, 10]
//! dominated_layers = [7]
//! threshold = 0.010               # detect
//! selector = "9&10"               # detect
//! thresholds = [0.010, 0.015, 0.020, 0.025]   # grid
//! selectors = ["max", "mean", "L8", "L9", "L10", "8&9", "8&10", "9&10"]
//! ```
//!
//! `synth` reads a different file: either a `[trace]` table holding one
//! trace's parameters or a `[corpus]` table describing a labelled corpus.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dvdlens::detector::{default_selectors, LayerSelector, DEFAULT_THRESHOLDS};
use dvdlens::metrics::{FocusParams, DEFAULT_FOCUS_EPSILON};
use dvdlens::scoring::{Boundary, BOUNDARY, DVD_THRESHOLD, MIN_DVD_IMAGES};
use dvdlens::synth::{CorpusSpec, SynthParams};
use dvdlens::DetectorConfig;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub dvd_threshold: f64,
    pub min_count: usize,
    pub boundary: Boundary,
    pub focus_epsilon: f64,
    pub ablate_scale: f64,
    pub step: usize,
    pub bin_size: usize,
    pub dominant_layers: Option<BTreeSet<usize>>,
    pub dominated_layers: Option<BTreeSet<usize>>,
    pub threshold: f64,
    pub selector: LayerSelector,
    pub thresholds: Vec<f64>,
    pub selectors: Vec<LayerSelector>,
}

impl Default for RunSettings {
    fn default() -> Self {
        let detector = DetectorConfig::default();
        Self {
            dvd_threshold: DVD_THRESHOLD,
            min_count: MIN_DVD_IMAGES,
            boundary: BOUNDARY,
            focus_epsilon: DEFAULT_FOCUS_EPSILON,
            ablate_scale: dvdlens::ablation::DEFAULT_ABLATION_SCALE,
            step: 0,
            bin_size: 10,
            dominant_layers: None,
            dominated_layers: None,
            threshold: detector.threshold,
            selector: detector.selector,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            selectors: default_selectors(),
        }
    }
}

impl RunSettings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text)?;
        if s.bin_size == 0 {
            bail!("bin_size must be at least 1");
        }
        Ok(s)
    }

    pub fn focus(&self) -> Result<FocusParams> {
        Ok(FocusParams::new(self.focus_epsilon)?)
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            threshold: self.threshold,
            selector: self.selector.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SynthFile {
    Trace(SynthParams),
    Corpus(CorpusSpec),
}

impl SynthFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Self::Trace(p) => Self::Trace(SynthParams { seed, ..p }),
            Self::Corpus(c) => Self::Corpus(CorpusSpec { seed, ..c }),
        }
    }
}
