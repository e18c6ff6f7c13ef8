use crate::autodiff::{NodeId, Tape};
use crate::scenegen::{ClassId, Domain, SceneSample};

use super::anchors::AnchorGrid;
use super::boxes::{box_encode, iou, Box2D};
use super::model::{DetectorForward, DetectorNet};
use super::DetectorError;

pub const ANCHOR_POS_IOU: f64 = 0.5;
pub const ANCHOR_NEG_IOU: f64 = 0.3;
pub const ROI_POS_IOU: f64 = 0.5;

/// Per-anchor assignment: positive (1), negative (0), or ignored (-1), plus
/// the matched ground-truth index for positives.
#[derive(Debug, Clone)]
pub struct AnchorMatch {
    pub labels: Vec<i8>,
    pub matched_gt: Vec<usize>,
}

/// Threshold-based anchor assignment, plus the best anchor per ground truth
/// forced positive (the standard two-stage rule; without it, off-grid
/// objects can end up with no positive anchor at all).
pub fn match_anchors(anchors: &AnchorGrid, gts: &[Box2D]) -> AnchorMatch {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut matched_gt = vec![usize::MAX; n];
    let mut best_iou = vec![0.0f64; n];

    for (i, anchor) in anchors.all().iter().enumerate() {
        let mut best = 0.0;
        let mut best_g = usize::MAX;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                best_g = g;
            }
        }
        best_iou[i] = best;
        if best >= ANCHOR_POS_IOU {
            labels[i] = 1;
            matched_gt[i] = best_g;
        } else if best >= ANCHOR_NEG_IOU {
            labels[i] = -1;
        } else {
            labels[i] = 0;
        }
    }

    for (g, gt) in gts.iter().enumerate() {
        let mut best = 0.0;
        let mut best_a = usize::MAX;
        for (i, anchor) in anchors.all().iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                best_a = i;
            }
        }
        if best_a != usize::MAX && best > 0.0 {
            // Keep a higher-IoU assignment if another GT already claimed it.
            if labels[best_a] != 1 || iou(anchors.get(best_a), &gts[matched_gt[best_a]]) < best {
                labels[best_a] = 1;
                matched_gt[best_a] = g;
            }
        }
    }

    AnchorMatch { labels, matched_gt }
}

/// The four supervised terms and their sum.
#[derive(Debug, Clone)]
pub struct DetectionLossParts {
    pub total: NodeId,
    pub rpn_obj: NodeId,
    pub rpn_box: NodeId,
    pub roi_cls: NodeId,
    pub roi_box: NodeId,
    pub num_pos_anchors: usize,
    pub num_pos_rois: usize,
}

/// Match each proposal to its best ground truth at `ROI_POS_IOU`; background
/// otherwise. Returns (matched gt index or MAX, class index or background).
pub fn match_proposals(
    proposals: &[Box2D],
    gts: &[(usize, Box2D)],
    num_classes: usize,
) -> Vec<(usize, usize)> {
    proposals
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut best_g = usize::MAX;
            for (g, (_, gt)) in gts.iter().enumerate() {
                let v = iou(p, gt);
                if v > best {
                    best = v;
                    best_g = g;
                }
            }
            if best >= ROI_POS_IOU {
                (best_g, gts[best_g].0)
            } else {
                (usize::MAX, num_classes)
            }
        })
        .collect()
}

/// Supervised detection loss on one source image:
/// RPN objectness BCE (mean over non-ignored anchors) + RPN box smooth-L1
/// (mean over positives) + ROI softmax cross-entropy over classes+background
/// (mean over proposals) + ROI box smooth-L1 on matched proposals.
///
/// Calling this with a target-domain sample is a hard error.
pub fn detection_loss(
    tape: &mut Tape,
    net: &DetectorNet,
    fwd: &DetectorForward,
    anchors: &AnchorGrid,
    sample: &SceneSample,
    source_classes: &[ClassId],
) -> Result<DetectionLossParts, DetectorError> {
    if sample.domain != Domain::Source {
        return Err(DetectorError::TargetAnnotations);
    }
    let annotations = sample.annotations()?;
    let class_index = |id: ClassId| -> usize {
        source_classes
            .iter()
            .position(|&c| c == id)
            .expect("annotation class outside the source label set")
    };
    let gts: Vec<(usize, Box2D)> = annotations
        .iter()
        .map(|a| (class_index(a.class_id), a.bbox))
        .collect();
    let gt_boxes: Vec<Box2D> = gts.iter().map(|(_, b)| *b).collect();
    let g = net.cfg.grid();

    // RPN objectness over non-ignored anchors.
    let am = match_anchors(anchors, &gt_boxes);
    let mut labels = vec![0.0; anchors.len()];
    let mut mask = vec![0.0; anchors.len()];
    let mut considered = 0usize;
    let mut num_pos_anchors = 0usize;
    for i in 0..anchors.len() {
        match am.labels[i] {
            1 => {
                labels[i] = 1.0;
                mask[i] = 1.0;
                considered += 1;
                num_pos_anchors += 1;
            }
            0 => {
                mask[i] = 1.0;
                considered += 1;
            }
            _ => {}
        }
    }
    let probs_flat = tape.reshape(fwd.rpn.obj_probs, &[anchors.len()])?;
    let obj_sum = tape.bce_masked(probs_flat, labels, mask)?;
    let rpn_obj = tape.scale(obj_sum, 1.0 / considered.max(1) as f64)?;

    // RPN box regression on positive anchors.
    let rpn_box = if num_pos_anchors > 0 {
        let mut indices = Vec::with_capacity(4 * num_pos_anchors);
        let mut targets = Vec::with_capacity(4 * num_pos_anchors);
        for i in 0..anchors.len() {
            if am.labels[i] != 1 {
                continue;
            }
            let (a, y, x) = anchors.coords(i);
            let t = box_encode(anchors.get(i), &gt_boxes[am.matched_gt[i]])?;
            for k in 0..4 {
                indices.push(((a * 4 + k) * g + y) * g + x);
                targets.push(t[k]);
            }
        }
        let picked = tape.gather(fwd.rpn.deltas, indices)?;
        let target_node = tape.constant(&[targets.len()], &targets);
        let l1 = tape.smooth_l1(picked, target_node)?;
        tape.scale(l1, 1.0 / num_pos_anchors as f64)?
    } else {
        tape.scalar_constant(0.0)
    };

    // ROI classification and regression.
    let proposal_boxes: Vec<Box2D> = fwd.proposals.iter().map(|p| p.bbox).collect();
    let roi_match = match_proposals(&proposal_boxes, &gts, net.cfg.num_classes);
    let num_pos_rois = roi_match.iter().filter(|(g, _)| *g != usize::MAX).count();

    let (roi_cls, roi_box) = match fwd.cls_logits {
        Some(cls_logits) => {
            let classes: Vec<usize> = roi_match.iter().map(|&(_, c)| c).collect();
            let ce = tape.softmax_cross_entropy(cls_logits, &classes)?;
            let roi_cls = tape.scale(ce, 1.0 / fwd.proposals.len().max(1) as f64)?;

            let roi_box = if num_pos_rois > 0 {
                let deltas = fwd.box_deltas.expect("box head present with cls head");
                let mut indices = Vec::with_capacity(4 * num_pos_rois);
                let mut targets = Vec::with_capacity(4 * num_pos_rois);
                for (p, &(gt, _)) in roi_match.iter().enumerate() {
                    if gt == usize::MAX {
                        continue;
                    }
                    let t = box_encode(&proposal_boxes[p], &gt_boxes[gt])?;
                    for k in 0..4 {
                        indices.push(p * 4 + k);
                        targets.push(t[k]);
                    }
                }
                let picked = tape.gather(deltas, indices)?;
                let target_node = tape.constant(&[targets.len()], &targets);
                let l1 = tape.smooth_l1(picked, target_node)?;
                tape.scale(l1, 1.0 / num_pos_rois as f64)?
            } else {
                tape.scalar_constant(0.0)
            };
            (roi_cls, roi_box)
        }
        None => (tape.scalar_constant(0.0), tape.scalar_constant(0.0)),
    };

    let s1 = tape.add(rpn_obj, rpn_box)?;
    let s2 = tape.add(s1, roi_cls)?;
    let total = tape.add(s2, roi_box)?;
    Ok(DetectionLossParts {
        total,
        rpn_obj,
        rpn_box,
        roi_cls,
        roi_box,
        num_pos_anchors,
        num_pos_rois,
    })
}
