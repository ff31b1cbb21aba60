//! Bias auditing for image classifiers.
//!
//! The crate discovers data slices on which a classifier underperforms,
//! describes them with keywords, and trains models that are robust to them.
//! Every stage can first *ground* its inputs: each image is masked to the
//! region its classifier's explanation heatmap highlights, so that embeddings
//! and captions describe what the classifier actually looked at.
//!
//! Stages:
//!
//! - [`grounding`]: GradCAM heatmaps, thresholding and the grounding mask.
//! - [`overlap`]: overlap of explanation masks with core / spurious segmentations.
//! - [`slicing`]: error-aware mixture slicing and Precision@k.
//! - [`keywords`]: caption keywords ranked by embedding similarity.
//! - [`mitigation`]: ERM, JTT, group-robust training and zero-shot evaluation.
//! - [`metrics`] and [`report`]: grouped metrics and the audit report.
//!
//! [`providers`] holds the interfaces of all learned components together with
//! deterministic synthetic implementations, and [`synthdata`] generates
//! datasets with a planted spurious correlation and exact masks.

pub mod error;
pub mod grounding;
pub mod io;
pub mod keywords;
pub mod metrics;
pub mod mitigation;
pub mod model;
pub mod overlap;
pub mod providers;
pub mod report;
pub mod slicing;
pub mod synthdata;

pub use error::{Error, Result};
