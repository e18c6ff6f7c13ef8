//! The universal scale-aware adaptation stack: area bucketing, multi-label
//! domain+scale encoding, the confidence-threshold filter, the image-level
//! and instance-level multi-label discriminators, and the assembled
//! adversarial losses.
//!
//! Discriminators minimize standard cross-entropy; the feature extractor
//! receives the reversed gradient scaled by the trade-off coefficient, so the
//! whole minimax is realized by a single minimized scalar.

mod bucket;
mod diagnostics;
mod heads;
mod loss;
mod multilabel;

#[cfg(test)]
mod tests;

pub use bucket::{
    bucket_for_box, normalize_area, scale_bucket, ScaleBucket, AREA_NORMALIZATION,
    MEDIUM_MAX_AREA, SMALL_MAX_AREA,
};
pub use diagnostics::{discriminator_group_means, GroupMeans};
pub use heads::{DiscriminatorHeads, HeadConfig};
pub use loss::{
    buckets_for_boxes, image_level_loss, instance_buckets_source, instance_level_loss,
    location_labels, multilabel_da_loss, total_objective, unida_loss, DaItems, DaLoss,
};
pub use multilabel::{encode_multilabel, filter_keep, EncodedLabel, FilterConfig, MultiLabelVector};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("box area must be positive, got {0}")]
    NonPositiveArea(f64),

    #[error("filter threshold must lie in (0, 0.5], got {0}")]
    BadFilterThreshold(f64),

    #[error("discriminator width must be 1 or 4, got {0}")]
    BadWidth(usize),

    #[error("misaligned items: {preds} predictions vs {labels} labels")]
    MisalignedItems { preds: usize, labels: usize },

    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),

    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
}
