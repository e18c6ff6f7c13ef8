use serde::{Deserialize, Serialize};

use super::Domain;

/// How object interiors are painted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Flat class color.
    Solid,
    /// Checkerboard blend of the class color toward the background.
    Textured,
    /// Only the outer band of the shape keeps the class color; the interior
    /// is strongly blended toward the background.
    Outlined,
}

/// Per-domain rendering style. The default source and target styles differ
/// along all four axes (background, fill, noise, brightness) so there is a
/// real appearance gap to bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: Domain,
    pub background: [f64; 3],
    pub fill: FillMode,
    pub noise_amplitude: f64,
    pub brightness_offset: f64,
}

impl DomainStyle {
    pub fn default_source() -> Self {
        DomainStyle {
            domain: Domain::Source,
            background: [0.15, 0.15, 0.18],
            fill: FillMode::Solid,
            noise_amplitude: 0.02,
            brightness_offset: 0.0,
        }
    }

    pub fn default_target() -> Self {
        DomainStyle {
            domain: Domain::Target,
            background: [0.32, 0.30, 0.26],
            fill: FillMode::Textured,
            noise_amplitude: 0.06,
            brightness_offset: 0.08,
        }
    }

    /// Count the style axes on which two styles differ; a usable pair of
    /// domain styles must differ on at least two.
    pub fn differing_axes(&self, other: &DomainStyle) -> usize {
        let mut n = 0;
        if self.background != other.background {
            n += 1;
        }
        if self.fill != other.fill {
            n += 1;
        }
        if (self.noise_amplitude - other.noise_amplitude).abs() > 1e-12 {
            n += 1;
        }
        if (self.brightness_offset - other.brightness_offset).abs() > 1e-12 {
            n += 1;
        }
        n
    }
}
