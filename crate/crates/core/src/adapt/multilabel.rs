use crate::scenegen::Domain;

use super::bucket::ScaleBucket;
use super::AdaptError;

/// The 4-entry domain+scale vector. Entry 0 encodes the domain (0 source,
/// 1 target); entries 1..4 one-hot the scale bucket in label form, or hold
/// independent probabilities in prediction form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLabelVector(pub [f64; 4]);

/// A label vector plus whether its scale entries participate in the loss.
/// Locations without an assigned bucket keep only the domain entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedLabel {
    pub vector: MultiLabelVector,
    pub scale_assigned: bool,
}

/// Encode a (domain, bucket) pair:
/// source small/medium/large -> [0,1,0,0] / [0,0,1,0] / [0,0,0,1],
/// target small/medium/large -> [1,1,0,0] / [1,0,1,0] / [1,0,0,1],
/// no bucket -> [d,0,0,0] with the scale entries excluded.
pub fn encode_multilabel(domain: Domain, bucket: Option<ScaleBucket>) -> EncodedLabel {
    let d = match domain {
        Domain::Source => 0.0,
        Domain::Target => 1.0,
    };
    let mut v = [d, 0.0, 0.0, 0.0];
    match bucket {
        Some(b) => {
            v[1 + b.index()] = 1.0;
            EncodedLabel {
                vector: MultiLabelVector(v),
                scale_assigned: true,
            }
        }
        None => EncodedLabel {
            vector: MultiLabelVector(v),
            scale_assigned: false,
        },
    }
}

/// Confidence threshold of the filter mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub m: f64,
}

impl FilterConfig {
    pub fn new(m: f64) -> Result<Self, AdaptError> {
        if !(m > 0.0 && m <= 0.5) {
            return Err(AdaptError::BadFilterThreshold(m));
        }
        Ok(FilterConfig { m })
    }
}

/// Keep a sample iff its domain prediction lies strictly within `m` of the
/// decision midpoint 0.5.
pub fn filter_keep(d0: f64, m: f64) -> bool {
    (d0 - 0.5).abs() < m
}
