//! Miniature two-stage detector: a small convolutional backbone, an
//! anchor-based proposal module, and an ROI head with classification and
//! class-agnostic box regression. Produces the supervised detection loss and
//! the feature surfaces the adaptation stack aligns.

pub mod anchors;
pub mod boxes;
pub mod loss;
pub mod model;


pub use anchors::AnchorGrid;
pub use boxes::{box_encode, box_transform, iou, nms, Box2D, BoxError};
pub use loss::{detection_loss, match_anchors, match_proposals, AnchorMatch, DetectionLossParts};
pub use model::{
    DetectorConfig, DetectorForward, DetectorNet, Detection, Proposal, RpnOutputs,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),

    #[error(transparent)]
    Box2D(#[from] BoxError),

    #[error("detection loss requires source-domain annotations")]
    TargetAnnotations,

    #[error(transparent)]
    Scene(#[from] crate::scenegen::SceneGenError),

    #[error("input image must be {expected}x{expected}x3, got {got:?}")]
    BadInputShape { expected: usize, got: Vec<usize> },
}
