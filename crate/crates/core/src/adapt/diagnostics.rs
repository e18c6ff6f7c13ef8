use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Tape};
use crate::detector::DetectorNet;
use crate::scenegen::{LabelSpaceConfig, SceneSample};

use super::heads::DiscriminatorHeads;
use super::AdaptError;

/// Mean instance-level domain prediction per (domain, common-vs-private)
/// group. Groups without instances report `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub src_private: Option<f64>,
    pub src_common: Option<f64>,
    pub tgt_common: Option<f64>,
    pub tgt_private: Option<f64>,
}

impl GroupMeans {
    /// Whether the separability ordering
    /// `src_private < src_common < tgt_common < tgt_private` holds; `None`
    /// when some group is absent.
    pub fn ordering_holds(&self) -> Option<bool> {
        match (self.src_private, self.src_common, self.tgt_common, self.tgt_private) {
            (Some(sp), Some(sc), Some(tc), Some(tp)) => Some(sp < sc && sc < tc && tc < tp),
            _ => None,
        }
    }
}

/// Mean predicted domain entry of the instance head over ground-truth
/// instances, grouped by domain and common-vs-private class membership.
///
/// This is an evaluation-side diagnostic: annotations are read through the
/// diagnostic accessor, never the training one. At most `max_per_domain`
/// samples per domain are visited (deterministically, from the front).
pub fn discriminator_group_means(
    net: &DetectorNet,
    heads: &DiscriminatorHeads,
    params: &Params,
    label_space: &LabelSpaceConfig,
    source_samples: &[SceneSample],
    target_samples: &[SceneSample],
    max_per_domain: usize,
) -> Result<GroupMeans, AdaptError> {
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];

    for (is_target, samples) in [(false, source_samples), (true, target_samples)] {
        for sample in samples.iter().take(max_per_domain) {
            let annotations = sample.eval_annotations();
            if annotations.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let binds = params.bind_all(&mut tape);
            let fmap = net.backbone_forward(&mut tape, &binds, &sample.image.to_chw())?;
            let rows: Vec<_> = annotations
                .iter()
                .map(|a| {
                    let gathered = tape.gather(fmap, net.roi_indices_for(&a.bbox))?;
                    tape.reshape(gathered, &[1, net.cfg.roi_feat_len()])
                })
                .collect::<Result<_, _>>()?;
            let stacked = tape.concat_rows(&rows)?;
            let preds = heads.instance_forward(&mut tape, &binds, stacked, 0.0)?;
            let values = tape.values(preds);
            let width = heads.cfg.width;
            for (i, ann) in annotations.iter().enumerate() {
                let common = label_space.is_common(ann.class_id);
                let group = match (is_target, common) {
                    (false, false) => 0,
                    (false, true) => 1,
                    (true, true) => 2,
                    (true, false) => 3,
                };
                sums[group] += values[i * width];
                counts[group] += 1;
            }
        }
    }

    let mean = |g: usize| -> Option<f64> {
        if counts[g] > 0 {
            Some(sums[g] / counts[g] as f64)
        } else {
            None
        }
    };
    Ok(GroupMeans {
        src_private: mean(0),
        src_common: mean(1),
        tgt_common: mean(2),
        tgt_private: mean(3),
    })
}
