use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detector::boxes::Box2D;

use super::manifest::{SizeClass, SizeRanges};
use super::shapes::{class_color, covers, shape_kind};
use super::style::{DomainStyle, FillMode};
use super::{ClassId, Domain, SceneGenError};

/// H x W x 3 image with float channels in [0,1], row-major RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Repack into channel-major `[3, h, w]` order for the detector input.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            out[p] = self.data[p * 3];
            out[hw + p] = self.data[p * 3 + 1];
            out[2 * hw + p] = self.data[p * 3 + 2];
        }
        out
    }
}

/// One ground-truth object: class, tight pixel bounding box, and the
/// generator-side size class it was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub class_id: ClassId,
    pub bbox: Box2D,
    pub size_class: SizeClass,
}

/// Shared counter of training-side annotation reads on hidden-label samples.
/// A healthy run finishes with zero recorded violations.
#[derive(Debug, Clone, Default)]
pub struct LabelGuard(Arc<AtomicU64>);

impl LabelGuard {
    pub fn new() -> Self {
        LabelGuard::default()
    }

    pub fn violations(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn record_violation(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// A rendered scene plus its annotations, tagged with the domain it belongs
/// to. Target-train samples hide their annotations from the training-facing
/// accessor.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Image,
    pub domain: Domain,
    annotations: Vec<Annotation>,
    hidden_labels: bool,
    guard: LabelGuard,
}

impl SceneSample {
    pub fn new(
        image: Image,
        domain: Domain,
        annotations: Vec<Annotation>,
        hidden_labels: bool,
        guard: LabelGuard,
    ) -> Self {
        SceneSample {
            image,
            domain,
            annotations,
            hidden_labels,
            guard,
        }
    }

    /// Training-facing accessor. Reading a hidden-label sample is an error
    /// and is recorded on the guard.
    pub fn annotations(&self) -> Result<&[Annotation], SceneGenError> {
        if self.hidden_labels {
            self.guard.record_violation();
            return Err(SceneGenError::HiddenLabelAccess);
        }
        Ok(&self.annotations)
    }

    /// Evaluation/diagnostic accessor; always available.
    pub fn eval_annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn labels_hidden(&self) -> bool {
        self.hidden_labels
    }
}

/// One requested object. `placement` pins center and side exactly (used by
/// fixtures and debugging); free objects are placed into random layout slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class_id: ClassId,
    pub size_class: SizeClass,
    pub placement: Option<(f64, f64, f64)>,
}

impl ObjectSpec {
    pub fn free(class_id: ClassId, size_class: SizeClass) -> Self {
        ObjectSpec { class_id, size_class, placement: None }
    }

    pub fn fixed(class_id: ClassId, size_class: SizeClass, cx: f64, cy: f64, side: f64) -> Self {
        ObjectSpec { class_id, size_class, placement: Some((cx, cy, side)) }
    }
}

/// Scene-level geometry parameters shared by every render call.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub image_size: usize,
    pub size_ranges: SizeRanges,
    pub min_box_area: f64,
    pub max_attempts: usize,
}

impl SceneGeometry {
    pub fn new(image_size: usize, size_ranges: SizeRanges) -> Self {
        SceneGeometry {
            image_size,
            size_ranges,
            min_box_area: 16.0,
            max_attempts: 10,
        }
    }
}

/// Output of [`render_scene`]: the image, tight-box annotations in request
/// order, and the per-object coverage masks (for tightness checks).
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub masks: Vec<Vec<bool>>,
}

const MAX_OBJECTS: usize = 6;
const BOX_GAP: f64 = 2.0;

struct Rasterized {
    mask: Vec<bool>,
    bbox: Box2D,
}

/// Coverage mask of a shape at (cx, cy) with side `s`; None when no pixel is
/// covered or the shape leaks outside the image.
fn rasterize(
    class_id: ClassId,
    cx: f64,
    cy: f64,
    s: f64,
    size: usize,
) -> Option<Rasterized> {
    let kind = shape_kind(class_id);
    let half = s / 2.0 + 1.0;
    let x0 = (cx - half).floor().max(0.0) as usize;
    let y0 = (cy - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(size);
    let y1 = ((cy + half).ceil() as usize).min(size);
    if (cx - s / 2.0) < 0.0 || (cy - s / 2.0) < 0.0 {
        return None;
    }
    if (cx + s / 2.0) > size as f64 || (cy + s / 2.0) > size as f64 {
        return None;
    }
    let mut mask = vec![false; size * size];
    let (mut mnx, mut mny, mut mxx, mut mxy) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for py in y0..y1 {
        for px in x0..x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if covers(kind, dx, dy, s) {
                mask[py * size + px] = true;
                any = true;
                mnx = mnx.min(px);
                mny = mny.min(py);
                mxx = mxx.max(px);
                mxy = mxy.max(py);
            }
        }
    }
    if !any {
        return None;
    }
    Some(Rasterized {
        mask,
        bbox: Box2D::new(mnx as f64, mny as f64, (mxx + 1) as f64, (mxy + 1) as f64),
    })
}

fn boxes_too_close(a: &Box2D, b: &Box2D) -> bool {
    let grown = Box2D::new(
        a.x_min - BOX_GAP,
        a.y_min - BOX_GAP,
        a.x_max + BOX_GAP,
        a.y_max + BOX_GAP,
    );
    grown.intersection_area(b) > 0.0
}

fn draw_object(
    image: &mut Image,
    mask: &[bool],
    class_id: ClassId,
    cx: f64,
    cy: f64,
    s: f64,
    style: &DomainStyle,
) {
    let color = class_color(class_id);
    let kind = shape_kind(class_id);
    let size = image.width;
    for py in 0..size {
        for px in 0..size {
            if !mask[py * size + px] {
                continue;
            }
            let c = match style.fill {
                FillMode::Solid => color,
                FillMode::Textured => {
                    if (px / 2 + py / 2) % 2 == 0 {
                        color
                    } else {
                        blend(color, style.background, 0.45)
                    }
                }
                FillMode::Outlined => {
                    let dx = px as f64 + 0.5 - cx;
                    let dy = py as f64 + 0.5 - cy;
                    if covers(kind, dx, dy, s * 0.7) {
                        blend(color, style.background, 0.75)
                    } else {
                        color
                    }
                }
            };
            image.set_pixel(px, py, c);
        }
    }
}

fn blend(c: [f64; 3], toward: [f64; 3], t: f64) -> [f64; 3] {
    [
        c[0] * (1.0 - t) + toward[0] * t,
        c[1] * (1.0 - t) + toward[1] * t,
        c[2] * (1.0 - t) + toward[2] * t,
    ]
}

/// Render one scene. Deterministic given the RNG state; annotations carry
/// the exact pixel bounding box of each object's coverage mask.
pub fn render_scene(
    objects: &[ObjectSpec],
    style: &DomainStyle,
    geom: &SceneGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<RenderedScene, SceneGenError> {
    if objects.len() > MAX_OBJECTS {
        return Err(SceneGenError::TooManyObjects(objects.len(), MAX_OBJECTS));
    }
    let size = geom.image_size;
    let mut image = Image::filled(size, size, style.background);
    let mut annotations = Vec::with_capacity(objects.len());
    let mut masks = Vec::with_capacity(objects.len());
    let mut placed: Vec<Box2D> = Vec::with_capacity(objects.len());

    // Free objects go into disjoint layout slots; a 2x2 grid for up to four
    // objects, 3x3 beyond that. Slots guarantee separation without rejection
    // storms at high densities.
    let n_free = objects.iter().filter(|o| o.placement.is_none()).count();
    let grid = if n_free <= 4 { 2usize } else { 3 };
    let mut slot_ids: Vec<usize> = (0..grid * grid).collect();
    slot_ids.shuffle(rng);
    let slot_px = size as f64 / grid as f64;
    let mut next_slot = 0;

    for spec in objects {
        let mut done = false;
        let attempts = if spec.placement.is_some() {
            1
        } else {
            geom.max_attempts
        };
        let slot = if spec.placement.is_none() {
            let s = slot_ids[next_slot];
            next_slot += 1;
            Some(s)
        } else {
            None
        };
        for _ in 0..attempts {
            let (cx, cy, side) = match spec.placement {
                Some(p) => p,
                None => {
                    let (lo, hi) = geom.size_ranges.range(spec.size_class);
                    let side = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                    let slot = slot.unwrap();
                    let sx0 = (slot % grid) as f64 * slot_px;
                    let sy0 = (slot / grid) as f64 * slot_px;
                    let margin = side / 2.0 + 1.0;
                    let (cx_lo, cx_hi) = (sx0 + margin, sx0 + slot_px - margin);
                    let (cy_lo, cy_hi) = (sy0 + margin, sy0 + slot_px - margin);
                    if cx_hi <= cx_lo || cy_hi <= cy_lo {
                        continue;
                    }
                    (
                        rng.gen_range(cx_lo..cx_hi),
                        rng.gen_range(cy_lo..cy_hi),
                        side,
                    )
                }
            };
            let raster = match rasterize(spec.class_id, cx, cy, side, size) {
                Some(r) => r,
                None => continue,
            };
            if raster.bbox.area() < geom.min_box_area {
                continue;
            }
            if placed.iter().any(|b| boxes_too_close(b, &raster.bbox)) {
                continue;
            }
            draw_object(&mut image, &raster.mask, spec.class_id, cx, cy, side, style);
            placed.push(raster.bbox);
            annotations.push(Annotation {
                class_id: spec.class_id,
                bbox: raster.bbox,
                size_class: spec.size_class,
            });
            masks.push(raster.mask);
            done = true;
            break;
        }
        if !done {
            return Err(SceneGenError::ObjectPlacement {
                class_id: spec.class_id,
                attempts,
            });
        }
    }

    // Global style: brightness offset, then per-pixel noise, then clamp.
    for v in image.data.iter_mut() {
        *v += style.brightness_offset;
    }
    if style.noise_amplitude > 0.0 {
        let amp = style.noise_amplitude;
        for v in image.data.iter_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(RenderedScene { image, annotations, masks })
}
