//! Analysis of concept dominance in multi-concept text-to-image generation,
//! driven by exported cross-attention traces.
//!
//! - [`model`]: trace types and validation
//! - [`container`]: the on-disk trace container
//! - [`metrics`]: focus score, attention deviation and friends
//! - [`scoring`]: DvD Score and benchmark filtering
//! - [`ablation`]: head ablation and outcome ratios
//! - [`detector`]: first-step detector and grid search
//! - [`synth`]: seeded synthetic traces
//! - [`report`]: JSON / CSV result tables

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod container;
pub mod detector;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scoring;
pub mod stats;
pub mod synth;

pub use container::{read_container, read_trace, write_container, write_trace, ContainerError};
pub use detector::{detect, grid_eval, select_config, DetectorConfig, GridResult, LayerSelector};
pub use metrics::FocusParams;
pub use model::{validate, Trace};
