//! Segmentation and clustering metrics plus classical graph baselines.

use thiserror::Error;

mod baselines;
mod metrics;

pub use baselines::{
    cc_components_baseline, eigen_gap_k, kmeans, spectral_baseline, SpectralResult, KMEANS_RESTARTS,
};
pub use metrics::{
    ari, corloc, iou_bbox, miou_mask, nmi, purity, read_box_lines, BoxRecord, ImageRecord, MetricReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
}
