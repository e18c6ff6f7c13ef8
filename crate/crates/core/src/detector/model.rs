use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_fan_in, NodeId, ParamId, Params, Tape, Tensor};
use crate::scenegen::ClassId;

use super::anchors::AnchorGrid;
use super::boxes::{box_transform, nms, Box2D};
use super::DetectorError;

/// Architecture hyperparameters of the miniature detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub stride: usize,
    pub anchor_sides: Vec<f64>,
    pub roi_pool: usize,
    pub roi_hidden: usize,
    pub num_classes: usize,
    pub top_k: usize,
    pub rpn_nms_iou: f64,
    pub score_thresh: f64,
    pub detect_nms_iou: f64,
}

impl DetectorConfig {
    pub fn new(num_classes: usize) -> Self {
        DetectorConfig {
            image_size: 64,
            channels: 32,
            stride: 8,
            anchor_sides: vec![6.0, 16.0, 40.0],
            roi_pool: 4,
            roi_hidden: 64,
            num_classes,
            top_k: 32,
            rpn_nms_iou: 0.5,
            score_thresh: 0.05,
            detect_nms_iou: 0.5,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }

    /// Flattened ROI feature length.
    pub fn roi_feat_len(&self) -> usize {
        self.roi_pool * self.roi_pool * self.channels
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        AnchorGrid::new(self.image_size, self.stride, &self.anchor_sides)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIds {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

/// Parameter handles of the detector network.
#[derive(Debug, Clone)]
pub struct DetectorNet {
    pub cfg: DetectorConfig,
    conv1: ConvIds,
    conv2: ConvIds,
    conv3: ConvIds,
    rpn_trunk: ConvIds,
    rpn_obj: ConvIds,
    rpn_box: ConvIds,
    roi_fc1: ConvIds,
    roi_cls: ConvIds,
    roi_box: ConvIds,
}

pub(crate) fn add_conv(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<ConvIds, DetectorError> {
    let fan_in = cin * k * k;
    let weight = params.add(
        &format!("{name}.weight"),
        Tensor::new(
            vec![cout, cin, k, k],
            uniform_fan_in(rng, fan_in, cout * cin * k * k),
            true,
        ),
    )?;
    let bias = params.add(&format!("{name}.bias"), Tensor::zeros(vec![cout], true))?;
    Ok(ConvIds { weight, bias })
}

pub(crate) fn add_linear(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<ConvIds, DetectorError> {
    let weight = params.add(
        &format!("{name}.weight"),
        Tensor::new(vec![d_in, d_out], uniform_fan_in(rng, d_in, d_in * d_out), true),
    )?;
    let bias = params.add(&format!("{name}.bias"), Tensor::zeros(vec![d_out], true))?;
    Ok(ConvIds { weight, bias })
}

/// RPN head outputs on one image.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutputs {
    /// `[1, A, G, G]` objectness logits.
    pub obj_logits: NodeId,
    /// Sigmoid of the logits.
    pub obj_probs: NodeId,
    /// `[1, 4A, G, G]` box deltas, channel `a*4+k`.
    pub deltas: NodeId,
}

/// Candidate box with its objectness score and pooled ROI feature
/// (`[1, roi_feat_len]` row on the tape).
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub bbox: Box2D,
    pub score: f64,
    pub feature: NodeId,
    pub anchor_index: usize,
}

/// Final detector output for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box2D,
    pub class_id: ClassId,
    pub confidence: f64,
}

/// Everything one forward pass produces for one image.
#[derive(Debug, Clone)]
pub struct DetectorForward {
    pub feature_map: NodeId,
    pub rpn: RpnOutputs,
    pub proposals: Vec<Proposal>,
    /// `[P, hidden]` shared ROI trunk; absent when there are no proposals.
    pub roi_trunk: Option<NodeId>,
    /// `[P, num_classes+1]` classification logits.
    pub cls_logits: Option<NodeId>,
    /// `[P, 4]` class-agnostic refinement deltas.
    pub box_deltas: Option<NodeId>,
}

impl DetectorNet {
    /// Register all detector parameters (fan-in uniform weights, zero biases).
    pub fn build(
        params: &mut Params,
        cfg: DetectorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DetectorError> {
        let c = cfg.channels;
        let a = cfg.anchor_sides.len();
        let conv1 = add_conv(params, rng, "backbone.conv1", 16, 3, 3)?;
        let conv2 = add_conv(params, rng, "backbone.conv2", 32, 16, 3)?;
        let conv3 = add_conv(params, rng, "backbone.conv3", c, 32, 3)?;
        let rpn_trunk = add_conv(params, rng, "rpn.trunk", 32, c, 3)?;
        let rpn_obj = add_conv(params, rng, "rpn.obj", a, 32, 1)?;
        let rpn_box = add_conv(params, rng, "rpn.box", 4 * a, 32, 1)?;
        let roi_fc1 = add_linear(params, rng, "roi.fc1", cfg.roi_feat_len(), cfg.roi_hidden)?;
        let roi_cls = add_linear(params, rng, "roi.cls", cfg.roi_hidden, cfg.num_classes + 1)?;
        let roi_box = add_linear(params, rng, "roi.box", cfg.roi_hidden, 4)?;
        Ok(DetectorNet {
            cfg,
            conv1,
            conv2,
            conv3,
            rpn_trunk,
            rpn_obj,
            rpn_box,
            roi_fc1,
            roi_cls,
            roi_box,
        })
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        ids: ConvIds,
        x: NodeId,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<NodeId, DetectorError> {
        let c = tape.conv2d(x, binds[ids.weight.0], stride, pad)?;
        let b = tape.add_channel_bias(c, binds[ids.bias.0])?;
        Ok(if relu { tape.relu(b)? } else { b })
    }

    fn linear(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        ids: ConvIds,
        x: NodeId,
    ) -> Result<NodeId, DetectorError> {
        let m = tape.matmul(x, binds[ids.weight.0])?;
        Ok(tape.add_row_bias(m, binds[ids.bias.0])?)
    }

    /// Image (`[3,S,S]` channel-major values) to the `[1,C,G,G]` feature map.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        image_chw: &[f64],
    ) -> Result<NodeId, DetectorError> {
        let s = self.cfg.image_size;
        if image_chw.len() != 3 * s * s {
            return Err(DetectorError::BadInputShape {
                expected: s,
                got: vec![image_chw.len()],
            });
        }
        let x = tape.constant(&[1, 3, s, s], image_chw);
        let h1 = self.conv_block(tape, binds, self.conv1, x, 2, 1, true)?;
        let h2 = self.conv_block(tape, binds, self.conv2, h1, 2, 1, true)?;
        self.conv_block(tape, binds, self.conv3, h2, 2, 1, true)
    }

    pub fn rpn_forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        feature_map: NodeId,
    ) -> Result<RpnOutputs, DetectorError> {
        let trunk = self.conv_block(tape, binds, self.rpn_trunk, feature_map, 1, 1, true)?;
        let obj_logits = self.conv_block(tape, binds, self.rpn_obj, trunk, 1, 0, false)?;
        let obj_probs = tape.sigmoid(obj_logits)?;
        let deltas = self.conv_block(tape, binds, self.rpn_box, trunk, 1, 0, false)?;
        Ok(RpnOutputs { obj_logits, obj_probs, deltas })
    }

    /// Nearest-neighbor ROI pooling: flat feature-map indices of the
    /// `roi_pool^2` cells sampled for `bbox`, channel-major.
    pub fn roi_indices_for(&self, bbox: &Box2D) -> Vec<usize> {
        self.roi_indices(bbox)
    }

    fn roi_indices(&self, bbox: &Box2D) -> Vec<usize> {
        let g = self.cfg.grid();
        let p = self.cfg.roi_pool;
        let stride = self.cfg.stride as f64;
        let fx0 = bbox.x_min / stride;
        let fx1 = bbox.x_max / stride;
        let fy0 = bbox.y_min / stride;
        let fy1 = bbox.y_max / stride;
        let mut cells = Vec::with_capacity(p * p);
        for jy in 0..p {
            let v = fy0 + (jy as f64 + 0.5) * (fy1 - fy0) / p as f64;
            let iy = (v.floor().max(0.0) as usize).min(g - 1);
            for jx in 0..p {
                let u = fx0 + (jx as f64 + 0.5) * (fx1 - fx0) / p as f64;
                let ix = (u.floor().max(0.0) as usize).min(g - 1);
                cells.push(iy * g + ix);
            }
        }
        let mut indices = Vec::with_capacity(self.cfg.roi_feat_len());
        for c in 0..self.cfg.channels {
            for &cell in &cells {
                indices.push(c * g * g + cell);
            }
        }
        indices
    }

    /// Decode, clip, suppress, and keep the `top_k` best proposals, each with
    /// its pooled ROI feature.
    pub fn propose(
        &self,
        tape: &mut Tape,
        feature_map: NodeId,
        rpn: &RpnOutputs,
        anchors: &AnchorGrid,
        top_k: usize,
    ) -> Result<Vec<Proposal>, DetectorError> {
        let probs = tape.values(rpn.obj_probs).to_vec();
        let deltas = tape.values(rpn.deltas).to_vec();
        let g = self.cfg.grid();
        let size = self.cfg.image_size as f64;

        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut anchor_ids = Vec::new();
        for idx in 0..anchors.len() {
            let (a, y, x) = anchors.coords(idx);
            let delta = [
                deltas[((a * 4) * g + y) * g + x],
                deltas[((a * 4 + 1) * g + y) * g + x],
                deltas[((a * 4 + 2) * g + y) * g + x],
                deltas[((a * 4 + 3) * g + y) * g + x],
            ];
            let decoded = box_transform(anchors.get(idx), &delta)?.clip(size, size);
            if decoded.width() <= 1e-6 || decoded.height() <= 1e-6 {
                continue;
            }
            boxes.push(decoded);
            scores.push(probs[idx]);
            anchor_ids.push(idx);
        }
        let kept = nms(&boxes, &scores, self.cfg.rpn_nms_iou);
        let mut proposals = Vec::with_capacity(top_k.min(kept.len()));
        for &k in kept.iter().take(top_k) {
            let indices = self.roi_indices(&boxes[k]);
            let gathered = tape.gather(feature_map, indices)?;
            let feature = tape.reshape(gathered, &[1, self.cfg.roi_feat_len()])?;
            proposals.push(Proposal {
                bbox: boxes[k],
                score: scores[k],
                feature,
                anchor_index: anchor_ids[k],
            });
        }
        Ok(proposals)
    }

    /// Shared ROI trunk plus classification and box heads over all proposals.
    pub fn roi_forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        proposals: &[Proposal],
    ) -> Result<(Option<NodeId>, Option<NodeId>, Option<NodeId>), DetectorError> {
        if proposals.is_empty() {
            return Ok((None, None, None));
        }
        let rows: Vec<NodeId> = proposals.iter().map(|p| p.feature).collect();
        let stacked = tape.concat_rows(&rows)?;
        let h = self.linear(tape, binds, self.roi_fc1, stacked)?;
        let h = tape.relu(h)?;
        let cls = self.linear(tape, binds, self.roi_cls, h)?;
        let boxes = self.linear(tape, binds, self.roi_box, h)?;
        Ok((Some(h), Some(cls), Some(boxes)))
    }

    /// Full forward pass on one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        image_chw: &[f64],
        anchors: &AnchorGrid,
    ) -> Result<DetectorForward, DetectorError> {
        let feature_map = self.backbone_forward(tape, binds, image_chw)?;
        let rpn = self.rpn_forward(tape, binds, feature_map)?;
        let proposals = self.propose(tape, feature_map, &rpn, anchors, self.cfg.top_k)?;
        let (roi_trunk, cls_logits, box_deltas) = self.roi_forward(tape, binds, &proposals)?;
        Ok(DetectorForward {
            feature_map,
            rpn,
            proposals,
            roi_trunk,
            cls_logits,
            box_deltas,
        })
    }

    /// Turn a forward pass into final detections: per-proposal softmax,
    /// class-agnostic box refinement, score threshold, and per-class NMS.
    /// `source_classes` maps class indices back to dataset class ids.
    pub fn detections(
        &self,
        tape: &Tape,
        fwd: &DetectorForward,
        source_classes: &[ClassId],
    ) -> Result<Vec<Detection>, DetectorError> {
        let (cls, boxes) = match (fwd.cls_logits, fwd.box_deltas) {
            (Some(c), Some(b)) => (c, b),
            _ => return Ok(Vec::new()),
        };
        assert_eq!(source_classes.len(), self.cfg.num_classes);
        let k = self.cfg.num_classes + 1;
        let logits = tape.values(cls);
        let deltas = tape.values(boxes);
        let size = self.cfg.image_size as f64;

        let mut refined = Vec::with_capacity(fwd.proposals.len());
        let mut probs = vec![0.0; fwd.proposals.len() * k];
        for (p, prop) in fwd.proposals.iter().enumerate() {
            let delta = [
                deltas[p * 4],
                deltas[p * 4 + 1],
                deltas[p * 4 + 2],
                deltas[p * 4 + 3],
            ];
            refined.push(box_transform(&prop.bbox, &delta)?.clip(size, size));
            let row = &logits[p * k..(p + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            for j in 0..k {
                probs[p * k + j] = (row[j] - max).exp() / denom;
            }
        }

        let mut detections = Vec::new();
        for (cls_idx, &class_id) in source_classes.iter().enumerate() {
            let mut cand_boxes = Vec::new();
            let mut cand_scores = Vec::new();
            for p in 0..fwd.proposals.len() {
                let score = probs[p * k + cls_idx];
                if score >= self.cfg.score_thresh
                    && refined[p].width() > 1e-6
                    && refined[p].height() > 1e-6
                {
                    cand_boxes.push(refined[p]);
                    cand_scores.push(score);
                }
            }
            for &kept in &nms(&cand_boxes, &cand_scores, self.cfg.detect_nms_iou) {
                detections.push(Detection {
                    bbox: cand_boxes[kept],
                    class_id,
                    confidence: cand_scores[kept],
                });
            }
        }
        detections.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(detections)
    }
}
