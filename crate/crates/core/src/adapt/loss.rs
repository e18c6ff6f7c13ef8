use crate::autodiff::{NodeId, Tape};
use crate::detector::{iou, Box2D};
use crate::scenegen::Domain;

use super::bucket::{bucket_for_box, ScaleBucket};
use super::heads::DiscriminatorHeads;
use super::multilabel::{encode_multilabel, filter_keep, EncodedLabel, FilterConfig};
use super::AdaptError;

/// One aligned batch of discriminator predictions and labels. `preds` is a
/// `[n, width]` node of sigmoid outputs; `labels[i]` holds the first `width`
/// entries of the encoded label; `scale_assigned[i]` controls whether the
/// scale entries of item `i` participate (width-4 heads only).
#[derive(Debug, Clone)]
pub struct DaItems {
    pub preds: NodeId,
    pub labels: Vec<Vec<f64>>,
    pub scale_assigned: Vec<bool>,
}

impl DaItems {
    pub fn from_encoded(preds: NodeId, encoded: &[EncodedLabel], width: usize) -> Self {
        DaItems {
            preds,
            labels: encoded
                .iter()
                .map(|e| e.vector.0[..width].to_vec())
                .collect(),
            scale_assigned: encoded.iter().map(|e| e.scale_assigned).collect(),
        }
    }
}

/// A masked adversarial loss value plus its filter bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct DaLoss {
    pub node: NodeId,
    /// Items that passed the filter.
    pub kept: usize,
    /// Items considered before filtering.
    pub total_items: usize,
}

/// Masked multi-label cross-entropy over one or more batches.
///
/// Each item's first predicted entry decides, through the filter, whether the
/// whole item participates; dropped items contribute exactly zero loss and
/// zero gradient. Kept items sum per-entry BCE over their included entries
/// (the domain entry always, scale entries only when assigned). The total is
/// divided by `max(1, kept)` so the gradient scale is stable as the filter
/// drops items. `filter = None` keeps everything.
pub fn multilabel_da_loss(
    tape: &mut Tape,
    batches: &[DaItems],
    filter: Option<FilterConfig>,
) -> Result<DaLoss, AdaptError> {
    let mut kept = 0usize;
    let mut total_items = 0usize;
    let mut partial: Option<NodeId> = None;

    for batch in batches {
        let shape = tape.shape(batch.preds).to_vec();
        if shape.len() != 2 {
            return Err(AdaptError::MisalignedItems {
                preds: shape.iter().product(),
                labels: batch.labels.len(),
            });
        }
        let (n, width) = (shape[0], shape[1]);
        if batch.labels.len() != n || batch.scale_assigned.len() != n {
            return Err(AdaptError::MisalignedItems {
                preds: n,
                labels: batch.labels.len(),
            });
        }
        if n == 0 {
            continue;
        }
        let values = tape.values(batch.preds).to_vec();
        let mut labels = vec![0.0; n * width];
        let mut mask = vec![0.0; n * width];
        for i in 0..n {
            if batch.labels[i].len() != width {
                return Err(AdaptError::MisalignedItems {
                    preds: width,
                    labels: batch.labels[i].len(),
                });
            }
            total_items += 1;
            let d0 = values[i * width];
            let keep = filter.map_or(true, |f| filter_keep(d0, f.m));
            if !keep {
                continue;
            }
            kept += 1;
            labels[i * width] = batch.labels[i][0];
            mask[i * width] = 1.0;
            if width > 1 && batch.scale_assigned[i] {
                for k in 1..width {
                    labels[i * width + k] = batch.labels[i][k];
                    mask[i * width + k] = 1.0;
                }
            }
        }
        let flat = tape.reshape(batch.preds, &[n * width])?;
        let term = tape.bce_masked(flat, labels, mask)?;
        partial = Some(match partial {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }

    let node = match partial {
        Some(sum) => tape.scale(sum, 1.0 / kept.max(1) as f64)?,
        None => tape.scalar_constant(0.0),
    };
    Ok(DaLoss { node, kept, total_items })
}

/// Bucket each box by its own (normalized) area.
pub fn buckets_for_boxes(boxes: &[Box2D]) -> Result<Vec<(Box2D, ScaleBucket)>, AdaptError> {
    boxes
        .iter()
        .map(|b| Ok((*b, bucket_for_box(b)?)))
        .collect()
}

/// Source-side instance buckets: the matched ground-truth box's bucket when
/// some GT overlaps the proposal at IoU >= 0.5, otherwise the proposal's own
/// box bucket.
pub fn instance_buckets_source(
    proposals: &[Box2D],
    gts: &[Box2D],
) -> Result<Vec<ScaleBucket>, AdaptError> {
    proposals
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut best_g = usize::MAX;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(p, gt);
                if v > best {
                    best = v;
                    best_g = g;
                }
            }
            if best >= 0.5 {
                bucket_for_box(&gts[best_g])
            } else {
                bucket_for_box(p)
            }
        })
        .collect()
}

/// Per-location labels for the image-level head: each feature cell takes the
/// bucket of the highest-IoU box whose projection covers it; uncovered cells
/// keep only the domain entry.
pub fn location_labels(
    boxes: &[(Box2D, ScaleBucket)],
    domain: Domain,
    grid: usize,
    stride: usize,
) -> Vec<EncodedLabel> {
    let mut out = Vec::with_capacity(grid * grid);
    for y in 0..grid {
        for x in 0..grid {
            let cell = Box2D::new(
                (x * stride) as f64,
                (y * stride) as f64,
                ((x + 1) * stride) as f64,
                ((y + 1) * stride) as f64,
            );
            let mut best = 0.0;
            let mut bucket = None;
            for (b, bk) in boxes {
                if b.intersection_area(&cell) <= 0.0 {
                    continue;
                }
                let v = iou(b, &cell);
                if v > best {
                    best = v;
                    bucket = Some(*bk);
                }
            }
            out.push(encode_multilabel(domain, bucket));
        }
    }
    out
}

/// Image-level adversarial loss over a source/target feature-map pair.
/// Labels follow [`location_labels`]; predictions reach the head through the
/// gradient reversal inside [`DiscriminatorHeads::image_forward`].
#[allow(clippy::too_many_arguments)]
pub fn image_level_loss(
    tape: &mut Tape,
    heads: &DiscriminatorHeads,
    binds: &[NodeId],
    f_source: NodeId,
    f_target: NodeId,
    source_boxes: &[(Box2D, ScaleBucket)],
    target_boxes: &[(Box2D, ScaleBucket)],
    stride: usize,
    eta: f64,
    filter: Option<FilterConfig>,
) -> Result<DaLoss, AdaptError> {
    let grid = tape.shape(f_source)[2];
    let width = heads.cfg.width;
    let preds_s = heads.image_forward(tape, binds, f_source, eta)?;
    let preds_t = heads.image_forward(tape, binds, f_target, eta)?;
    let labels_s = location_labels(source_boxes, Domain::Source, grid, stride);
    let labels_t = location_labels(target_boxes, Domain::Target, grid, stride);
    multilabel_da_loss(
        tape,
        &[
            DaItems::from_encoded(preds_s, &labels_s, width),
            DaItems::from_encoded(preds_t, &labels_t, width),
        ],
        filter,
    )
}

/// Instance-level adversarial loss over the two domains' proposal features.
/// Either side may be absent (no proposals).
#[allow(clippy::too_many_arguments)]
pub fn instance_level_loss(
    tape: &mut Tape,
    heads: &DiscriminatorHeads,
    binds: &[NodeId],
    source: Option<(NodeId, Vec<ScaleBucket>)>,
    target: Option<(NodeId, Vec<ScaleBucket>)>,
    eta: f64,
    filter: Option<FilterConfig>,
) -> Result<DaLoss, AdaptError> {
    let width = heads.cfg.width;
    let mut batches = Vec::new();
    for (domain, side) in [(Domain::Source, source), (Domain::Target, target)] {
        if let Some((features, buckets)) = side {
            let preds = heads.instance_forward(tape, binds, features, eta)?;
            let encoded: Vec<EncodedLabel> = buckets
                .iter()
                .map(|b| encode_multilabel(domain, Some(*b)))
                .collect();
            batches.push(DaItems::from_encoded(preds, &encoded, width));
        }
    }
    multilabel_da_loss(tape, &batches, filter)
}

/// The combined adversarial loss: image-level plus instance-level.
pub fn unida_loss(tape: &mut Tape, l_img: NodeId, l_ins: NodeId) -> Result<NodeId, AdaptError> {
    Ok(tape.add(l_img, l_ins)?)
}

/// The single minimized scalar: detection loss plus the adversarial loss.
/// The minimax structure (discriminators descend, the feature path ascends
/// scaled by the reversal coefficient) is carried entirely by the gradient
/// reversals already inside the adversarial terms.
pub fn total_objective(
    tape: &mut Tape,
    l_det: NodeId,
    l_unida: NodeId,
) -> Result<NodeId, AdaptError> {
    Ok(tape.add(l_det, l_unida)?)
}
