//! Axis-aligned boxes, IoU, the anchor delta parameterization, and NMS.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("degenerate box: {0:?}")]
    Degenerate(Box2D),
}

/// Axis-aligned box in pixel coordinates, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Box2D { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
    }

    /// Clip to an image of `width` x `height` pixels.
    pub fn clip(&self, width: f64, height: f64) -> Box2D {
        Box2D {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    /// Swap the two axes; used by structural symmetry checks.
    pub fn transpose(&self) -> Box2D {
        Box2D {
            x_min: self.y_min,
            y_min: self.x_min,
            x_max: self.y_max,
            y_max: self.x_max,
        }
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression target of `gt` relative to `anchor`:
/// `(tx, ty, tw, th)` with center offsets scaled by the anchor size and
/// log-ratio width/height.
pub fn box_encode(anchor: &Box2D, gt: &Box2D) -> Result<[f64; 4], BoxError> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(BoxError::Degenerate(*anchor));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`box_encode`]: apply a delta to an anchor.
pub fn box_transform(anchor: &Box2D, delta: &[f64; 4]) -> Result<Box2D, BoxError> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(BoxError::Degenerate(*anchor));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + delta[0] * anchor.width();
    let cy = acy + delta[1] * anchor.height();
    let w = anchor.width() * delta[2].exp();
    let h = anchor.height() * delta[3].exp();
    Ok(Box2D {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    })
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties broken by lower index); a box
/// is suppressed when its IoU with any already-kept box exceeds
/// `iou_threshold`. Returns kept indices in visit order.
pub fn nms(boxes: &[Box2D], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
