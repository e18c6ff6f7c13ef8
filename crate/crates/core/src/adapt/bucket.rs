use serde::{Deserialize, Serialize};

use crate::detector::Box2D;

use super::AdaptError;

/// Desk-scale box areas are multiplied by this before bucketing, mapping the
/// 64-px working resolution onto the 600-px operating scale the thresholds
/// are defined at.
pub const AREA_NORMALIZATION: f64 = (600.0 / 64.0) * (600.0 / 64.0);

/// Exclusive upper area bound of the Small bucket (normalized units, 20^2).
pub const SMALL_MAX_AREA: f64 = 400.0;

/// Inclusive upper area bound of the Medium bucket (normalized units, 100^2).
pub const MEDIUM_MAX_AREA: f64 = 10_000.0;

/// Object scale category used by the scale-aware discriminator labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleBucket {
    Small,
    Medium,
    Large,
}

impl ScaleBucket {
    pub fn index(&self) -> usize {
        match self {
            ScaleBucket::Small => 0,
            ScaleBucket::Medium => 1,
            ScaleBucket::Large => 2,
        }
    }
}

impl std::fmt::Display for ScaleBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleBucket::Small => write!(f, "small"),
            ScaleBucket::Medium => write!(f, "medium"),
            ScaleBucket::Large => write!(f, "large"),
        }
    }
}

/// Map a desk-scale pixel area onto the normalized operating scale.
pub fn normalize_area(desk_area: f64) -> f64 {
    desk_area * AREA_NORMALIZATION
}

/// Bucket a normalized area: Small below 400, Medium in [400, 10000],
/// Large above.
pub fn scale_bucket(normalized_area: f64) -> Result<ScaleBucket, AdaptError> {
    if !(normalized_area > 0.0) {
        return Err(AdaptError::NonPositiveArea(normalized_area));
    }
    Ok(if normalized_area < SMALL_MAX_AREA {
        ScaleBucket::Small
    } else if normalized_area <= MEDIUM_MAX_AREA {
        ScaleBucket::Medium
    } else {
        ScaleBucket::Large
    })
}

/// Bucket a desk-scale box by its normalized area.
pub fn bucket_for_box(b: &Box2D) -> Result<ScaleBucket, AdaptError> {
    scale_bucket(normalize_area(b.area()))
}
