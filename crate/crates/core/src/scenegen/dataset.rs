use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::labelspace::{build_label_spaces, ClassId, LabelSpaceConfig};
use super::manifest::{DatasetManifest, SizeClass};
use super::render::{render_scene, LabelGuard, ObjectSpec, SceneGeometry, SceneSample};
use super::{Domain, SceneGenError};

/// A fully generated dataset: source train (labels visible), target train
/// (labels hidden from training), target test (labels visible for
/// evaluation).
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub label_space: LabelSpaceConfig,
    pub source_train: Vec<SceneSample>,
    pub target_train: Vec<SceneSample>,
    pub target_test: Vec<SceneSample>,
    guard: LabelGuard,
}

impl Dataset {
    pub fn guard(&self) -> &LabelGuard {
        &self.guard
    }

    /// SHA-256 over every image and annotation, for determinism checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for split in [&self.source_train, &self.target_train, &self.target_test] {
            for sample in split {
                for v in &sample.image.data {
                    hasher.update(v.to_le_bytes());
                }
                hasher.update([match sample.domain {
                    Domain::Source => 0u8,
                    Domain::Target => 1u8,
                }]);
                for ann in sample.eval_annotations() {
                    hasher.update(ann.class_id.to_le_bytes());
                    for v in [ann.bbox.x_min, ann.bbox.y_min, ann.bbox.x_max, ann.bbox.y_max] {
                        hasher.update(v.to_le_bytes());
                    }
                    hasher.update([ann.size_class.index() as u8]);
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            xi: self.label_space.xi,
            source_classes: self.label_space.source.clone(),
            target_classes: self.label_space.target.clone(),
            common_classes: self.label_space.common.clone(),
            source_train: split_stats(&self.source_train),
            target_train: split_stats(&self.target_train),
            target_test: split_stats(&self.target_test),
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitStats {
    pub scenes: usize,
    pub instances: usize,
    pub class_instances: BTreeMap<ClassId, usize>,
    pub size_class_hist: [usize; 3],
    pub mean_box_area: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub xi: f64,
    pub source_classes: Vec<ClassId>,
    pub target_classes: Vec<ClassId>,
    pub common_classes: Vec<ClassId>,
    pub source_train: SplitStats,
    pub target_train: SplitStats,
    pub target_test: SplitStats,
}

fn split_stats(samples: &[SceneSample]) -> SplitStats {
    let mut class_instances = BTreeMap::new();
    let mut hist = [0usize; 3];
    let mut area_sum = 0.0;
    let mut instances = 0;
    for s in samples {
        for ann in s.eval_annotations() {
            *class_instances.entry(ann.class_id).or_insert(0) += 1;
            hist[ann.size_class.index()] += 1;
            area_sum += ann.bbox.area();
            instances += 1;
        }
    }
    SplitStats {
        scenes: samples.len(),
        instances,
        class_instances,
        size_class_hist: hist,
        mean_box_area: if instances > 0 {
            area_sum / instances as f64
        } else {
            0.0
        },
    }
}

/// SplitMix64 finalizer; the per-scene seed derivation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scene_seed(dataset_seed: u64, split_tag: u64, index: usize) -> u64 {
    mix(dataset_seed ^ mix(split_tag ^ mix(index as u64)))
}

fn weighted_choice(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i;
        }
        draw -= w;
    }
    weights.len() - 1
}

/// Draw one scene's object list. The stop rule consumes a worst-case area
/// budget and is evaluated before each draw, so the per-object size-class
/// marginal stays exactly the configured mixture.
fn sample_scene_specs(
    rng: &mut ChaCha8Rng,
    classes: &[ClassId],
    mixture: &[f64; 3],
    manifest: &DatasetManifest,
) -> Vec<ObjectSpec> {
    let requested = weighted_choice(rng, &manifest.object_count_weights);
    let mut budget =
        manifest.area_budget_frac * (manifest.image_size * manifest.image_size) as f64;
    let worst_any = manifest.size_ranges.max_side().powi(2);
    let mut specs = Vec::with_capacity(requested);
    for _ in 0..requested {
        if worst_any > budget {
            break;
        }
        let size_class = SizeClass::ALL[weighted_choice(rng, mixture)];
        let (_, hi) = manifest.size_ranges.range(size_class);
        budget -= hi * hi;
        let class_id = classes[rng.gen_range(0..classes.len())];
        specs.push(ObjectSpec::free(class_id, size_class));
    }
    specs
}

/// Generate the three splits described by a manifest. Bit-identical output
/// for identical manifests; scenes are independent given (seed, split,
/// index).
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset, SceneGenError> {
    manifest.validate()?;
    let label_space = build_label_spaces(
        manifest.label_space.universe_size,
        manifest.label_space.scenario,
        manifest.label_space.xi,
        manifest.seed,
    )?;
    let guard = LabelGuard::new();
    let geom = SceneGeometry::new(manifest.image_size, manifest.size_ranges);

    let make_split = |tag: u64,
                      count: usize,
                      domain: Domain,
                      hidden: bool,
                      guard: &LabelGuard|
     -> Result<Vec<SceneSample>, SceneGenError> {
        let classes = match domain {
            Domain::Source => &label_space.source,
            Domain::Target => &label_space.target,
        };
        let style = match domain {
            Domain::Source => &manifest.source_style,
            Domain::Target => &manifest.target_style,
        };
        let mixture = manifest.scale_mixture.weights(domain);
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(manifest.seed, tag, i));
                let specs = sample_scene_specs(&mut rng, classes, mixture, manifest);
                let rendered = render_scene(&specs, style, &geom, &mut rng)?;
                Ok(SceneSample::new(
                    rendered.image,
                    domain,
                    rendered.annotations,
                    hidden,
                    guard.clone(),
                ))
            })
            .collect()
    };

    let source_train = make_split(0, manifest.counts.source_train, Domain::Source, false, &guard)?;
    let target_train = make_split(1, manifest.counts.target_train, Domain::Target, true, &guard)?;
    let target_test = make_split(2, manifest.counts.target_test, Domain::Target, false, &guard)?;

    Ok(Dataset {
        manifest: manifest.clone(),
        label_space,
        source_train,
        target_train,
        target_test,
        guard,
    })
}
