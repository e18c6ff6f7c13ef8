//! Procedural generation of paired source/target detection datasets.
//!
//! A [`DatasetManifest`] fully determines a dataset: regenerating from the
//! same manifest yields bit-identical samples. Label spaces with a chosen
//! overlap (Jaccard index) come from [`build_label_spaces`]; scenes are
//! rendered as flat-shaded geometric primitives whose appearance differs
//! between domains along the style axes (background, fill, noise,
//! brightness).
//!
//! Target-train annotations exist for diagnostics but are hidden from the
//! training-facing accessor, which counts every attempted read.

mod dataset;
mod labelspace;
mod manifest;
mod render;
mod shapes;
mod style;


pub use dataset::{generate_dataset, Dataset, DatasetStats, SplitStats};
pub use labelspace::{build_label_spaces, ClassId, LabelSpaceConfig, Scenario};
pub use manifest::{DatasetManifest, LabelSpaceSpec, ScaleMixture, SizeClass, SizeRanges, SplitCounts};
pub use render::{
    render_scene, Annotation, Image, LabelGuard, ObjectSpec, RenderedScene, SceneGeometry,
    SceneSample,
};
pub use shapes::{class_color, shape_kind, ShapeKind};
pub use style::{DomainStyle, FillMode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which side of the adaptation pair a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneGenError {
    #[error("universe must contain at least 4 classes, got {0}")]
    UniverseTooSmall(usize),

    #[error("xi={requested} is not achievable for universe size {universe}; achievable values: {}",
            achievable.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "))]
    UnachievableXi {
        requested: f64,
        universe: usize,
        achievable: Vec<f64>,
    },

    #[error("scenario {scenario:?} requires {msg}")]
    ScenarioConstraint { scenario: Scenario, msg: String },

    #[error("could not place object (class {class_id}) after {attempts} attempts")]
    ObjectPlacement { class_id: ClassId, attempts: usize },

    #[error("scene requested {0} objects, at most {1} are supported")]
    TooManyObjects(usize, usize),

    #[error("annotations of a hidden-label sample were requested through the training accessor")]
    HiddenLabelAccess,

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}
