use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Params, Tape};
use crate::detector::model::{add_conv, add_linear, ConvIds};

use super::AdaptError;

/// Shapes of the two discriminator heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub feature_channels: usize,
    pub image_hidden: usize,
    pub roi_feat_len: usize,
    pub instance_hidden: usize,
    /// 4 for the scale-aware multi-label heads, 1 for plain domain heads.
    pub width: usize,
}

impl HeadConfig {
    pub fn new(feature_channels: usize, roi_feat_len: usize, width: usize) -> Result<Self, AdaptError> {
        if width != 1 && width != 4 {
            return Err(AdaptError::BadWidth(width));
        }
        Ok(HeadConfig {
            feature_channels,
            image_hidden: 32,
            roi_feat_len,
            instance_hidden: 64,
            width,
        })
    }
}

/// Image-level (1x1 conv stack over the feature map) and instance-level
/// (two-layer perceptron over pooled ROI features) discriminator heads.
/// Both end in a sigmoid, so outputs live in (0,1).
#[derive(Debug, Clone)]
pub struct DiscriminatorHeads {
    pub cfg: HeadConfig,
    img_conv1: ConvIds,
    img_conv2: ConvIds,
    ins_fc1: ConvIds,
    ins_fc2: ConvIds,
}

impl DiscriminatorHeads {
    pub fn build(
        params: &mut Params,
        cfg: HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AdaptError> {
        let img_conv1 = add_conv(params, rng, "disc.img.conv1", cfg.image_hidden, cfg.feature_channels, 1)?;
        let img_conv2 = add_conv(params, rng, "disc.img.conv2", cfg.width, cfg.image_hidden, 1)?;
        let ins_fc1 = add_linear(params, rng, "disc.ins.fc1", cfg.roi_feat_len, cfg.instance_hidden)?;
        let ins_fc2 = add_linear(params, rng, "disc.ins.fc2", cfg.instance_hidden, cfg.width)?;
        Ok(DiscriminatorHeads { cfg, img_conv1, img_conv2, ins_fc1, ins_fc2 })
    }

    /// Per-location predictions `[n_locations, width]` for a `[1,C,G,G]`
    /// feature map. `eta > 0` routes the feature through a gradient reversal
    /// with that coefficient; `eta == 0` detaches the feature instead, so the
    /// head still trains while the extractor receives nothing.
    pub fn image_forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        feature_map: NodeId,
        eta: f64,
    ) -> Result<NodeId, AdaptError> {
        let g = tape.shape(feature_map)[2];
        let x = if eta > 0.0 {
            tape.grad_reverse(feature_map, eta)?
        } else {
            tape.detach(feature_map)?
        };
        let h = tape.conv2d(x, binds[self.img_conv1.weight.0], 1, 0)?;
        let h = tape.add_channel_bias(h, binds[self.img_conv1.bias.0])?;
        let h = tape.relu(h)?;
        let out = tape.conv2d(h, binds[self.img_conv2.weight.0], 1, 0)?;
        let out = tape.add_channel_bias(out, binds[self.img_conv2.bias.0])?;
        let probs = tape.sigmoid(out)?;
        // [1,width,G,G] -> [G*G, width]: per-location rows.
        let mut indices = Vec::with_capacity(g * g * self.cfg.width);
        for cell in 0..g * g {
            for k in 0..self.cfg.width {
                indices.push(k * g * g + cell);
            }
        }
        let permuted = tape.gather(probs, indices)?;
        Ok(tape.reshape(permuted, &[g * g, self.cfg.width])?)
    }

    /// Per-proposal predictions `[P, width]` for stacked ROI features
    /// `[P, roi_feat_len]`. Same `eta` contract as [`Self::image_forward`].
    pub fn instance_forward(
        &self,
        tape: &mut Tape,
        binds: &[NodeId],
        stacked_features: NodeId,
        eta: f64,
    ) -> Result<NodeId, AdaptError> {
        let x = if eta > 0.0 {
            tape.grad_reverse(stacked_features, eta)?
        } else {
            tape.detach(stacked_features)?
        };
        let h = tape.matmul(x, binds[self.ins_fc1.weight.0])?;
        let h = tape.add_row_bias(h, binds[self.ins_fc1.bias.0])?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, binds[self.ins_fc2.weight.0])?;
        let out = tape.add_row_bias(out, binds[self.ins_fc2.bias.0])?;
        Ok(tape.sigmoid(out)?)
    }
}
