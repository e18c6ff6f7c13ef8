use serde::{Deserialize, Serialize};

use super::labelspace::Scenario;
use super::shapes::{bbox_area_factor, shape_kind};
use super::style::DomainStyle;
use super::{Domain, SceneGenError};

/// Generator-side size class of an object. This is the unit the scale
/// mixture is expressed in; it is distinct from the adaptation-side scale
/// bucketing, which works on normalized box areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn index(&self) -> usize {
        match self {
            SizeClass::Small => 0,
            SizeClass::Medium => 1,
            SizeClass::Large => 2,
        }
    }
}

/// Nominal side ranges (pixels, half-open) for each size class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub small: (f64, f64),
    pub medium: (f64, f64),
    pub large: (f64, f64),
}

impl SizeRanges {
    pub fn range(&self, class: SizeClass) -> (f64, f64) {
        match class {
            SizeClass::Small => self.small,
            SizeClass::Medium => self.medium,
            SizeClass::Large => self.large,
        }
    }

    pub fn max_side(&self) -> f64 {
        self.small.1.max(self.medium.1).max(self.large.1)
    }

    /// E[s^2] for a side drawn uniformly from the class range.
    pub fn expected_side_sq(&self, class: SizeClass) -> f64 {
        let (lo, hi) = self.range(class);
        if hi <= lo {
            return lo * lo;
        }
        (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo))
    }
}

impl Default for SizeRanges {
    fn default() -> Self {
        // Sides chosen so that each class sits near one anchor scale.
        SizeRanges {
            small: (5.0, 7.5),
            medium: (13.0, 17.0),
            large: (18.0, 22.0),
        }
    }
}

/// Per-domain mixture weights over [small, medium, large].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMixture {
    pub source: [f64; 3],
    pub target: [f64; 3],
}

impl ScaleMixture {
    pub fn uniform() -> Self {
        let w = [1.0 / 3.0; 3];
        ScaleMixture { source: w, target: w }
    }

    /// Source skewed toward small objects, target toward large ones.
    pub fn shifted() -> Self {
        ScaleMixture {
            source: [0.55, 0.25, 0.20],
            target: [0.20, 0.30, 0.50],
        }
    }

    pub fn weights(&self, domain: Domain) -> &[f64; 3] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
}

/// Parameters from which the label-space partition is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceSpec {
    pub universe_size: usize,
    pub scenario: Scenario,
    pub xi: f64,
}

/// The full declarative description of a dataset. Everything the generator
/// does is a pure function of this structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub counts: SplitCounts,
    pub label_space: LabelSpaceSpec,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub scale_mixture: ScaleMixture,
    pub size_ranges: SizeRanges,
    /// Probability weights for the requested object count (index = count).
    pub object_count_weights: Vec<f64>,
    /// Fraction of the image area that requested worst-case object footprints
    /// may fill before the per-scene sampler stops adding objects.
    pub area_budget_frac: f64,
}

impl DatasetManifest {
    /// A ready-to-train manifest for one of the scenario presets.
    pub fn preset(scenario: Scenario, xi: f64, scale_shift: bool, seed: u64) -> Self {
        DatasetManifest {
            seed,
            image_size: 64,
            counts: SplitCounts {
                source_train: 800,
                target_train: 800,
                target_test: 200,
            },
            label_space: LabelSpaceSpec {
                universe_size: 8,
                scenario,
                xi,
            },
            source_style: DomainStyle::default_source(),
            target_style: DomainStyle::default_target(),
            scale_mixture: if scale_shift {
                ScaleMixture::shifted()
            } else {
                ScaleMixture::uniform()
            },
            size_ranges: SizeRanges::default(),
            object_count_weights: vec![0.05, 0.20, 0.30, 0.25, 0.20],
            area_budget_frac: 0.33,
        }
    }

    pub fn validate(&self) -> Result<(), SceneGenError> {
        if self.image_size < 32 {
            return Err(SceneGenError::InvalidManifest(format!(
                "image_size {} too small",
                self.image_size
            )));
        }
        if self.counts.source_train == 0 || self.counts.target_train == 0 {
            return Err(SceneGenError::InvalidManifest(
                "train splits must be non-empty".into(),
            ));
        }
        if self.source_style.domain != Domain::Source || self.target_style.domain != Domain::Target
        {
            return Err(SceneGenError::InvalidManifest(
                "style domains are swapped".into(),
            ));
        }
        if self.source_style.differing_axes(&self.target_style) < 2 {
            return Err(SceneGenError::InvalidManifest(
                "source and target styles must differ in at least two parameters".into(),
            ));
        }
        for w in self
            .scale_mixture
            .source
            .iter()
            .chain(self.scale_mixture.target.iter())
            .chain(self.object_count_weights.iter())
        {
            if !w.is_finite() || *w < 0.0 {
                return Err(SceneGenError::InvalidManifest(
                    "mixture weights must be non-negative".into(),
                ));
            }
        }
        if self.scale_mixture.source.iter().sum::<f64>() <= 0.0
            || self.scale_mixture.target.iter().sum::<f64>() <= 0.0
            || self.object_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(SceneGenError::InvalidManifest(
                "mixture weights must not all be zero".into(),
            ));
        }
        if self.object_count_weights.len() > 7 {
            return Err(SceneGenError::InvalidManifest(
                "at most 6 objects per scene".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.area_budget_frac) {
            return Err(SceneGenError::InvalidManifest(
                "area_budget_frac must lie in [0,1]".into(),
            ));
        }
        let max_side = self.size_ranges.max_side();
        if max_side + 4.0 > self.image_size as f64 / 2.0 {
            return Err(SceneGenError::InvalidManifest(format!(
                "largest object side {max_side} does not fit a placement slot"
            )));
        }
        Ok(())
    }

    /// Expected bounding-box area of one object in `domain`, combining the
    /// scale mixture, the uniform side draw, and the shape mix of `classes`.
    pub fn expected_object_area(&self, domain: Domain, classes: &[u32]) -> f64 {
        let weights = self.scale_mixture.weights(domain);
        let wsum: f64 = weights.iter().sum();
        let shape_factor = if classes.is_empty() {
            1.0
        } else {
            classes
                .iter()
                .map(|&c| bbox_area_factor(shape_kind(c)))
                .sum::<f64>()
                / classes.len() as f64
        };
        let mut area = 0.0;
        for class in SizeClass::ALL {
            area += weights[class.index()] / wsum * self.size_ranges.expected_side_sq(class);
        }
        area * shape_factor
    }
}
