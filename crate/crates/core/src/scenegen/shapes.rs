//! The eight primitive object classes and their per-pixel coverage tests.

/// Geometric primitive backing a class. Classes beyond the eight base shapes
/// reuse the shape cycle with a different color.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Diamond,
    Bar,
}

const SHAPES: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Star,
    ShapeKind::Diamond,
    ShapeKind::Bar,
];

pub fn shape_kind(class_id: u32) -> ShapeKind {
    SHAPES[(class_id % 8) as usize]
}

/// True when the point at offset `(dx, dy)` from the shape center is inside
/// a shape of nominal side `s`. Every shape fits the `s x s` square around
/// its center; the bar is shorter along y.
pub fn covers(kind: ShapeKind, dx: f64, dy: f64, s: f64) -> bool {
    let h = s / 2.0;
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= h * h,
        ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
        ShapeKind::Triangle => {
            // Apex at the top, base at the bottom.
            dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0
        }
        ShapeKind::Cross => {
            (dx.abs() <= s / 6.0 && dy.abs() <= h) || (dy.abs() <= s / 6.0 && dx.abs() <= h)
        }
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= h * h && r2 >= (0.55 * h) * (0.55 * h)
        }
        ShapeKind::Star => {
            // Astroid: concave four-point star touching the box midpoints.
            dx.abs().powf(2.0 / 3.0) + dy.abs().powf(2.0 / 3.0) <= h.powf(2.0 / 3.0)
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= h,
        ShapeKind::Bar => dx.abs() <= h && dy.abs() <= s / 4.0,
    }
}

/// Bounding-box area of a shape of side `s`, used when predicting the
/// expected object area of a size mixture.
pub fn bbox_area_factor(kind: ShapeKind) -> f64 {
    match kind {
        ShapeKind::Bar => 0.5,
        _ => 1.0,
    }
}

/// Deterministic, visually distinct color per class: hue spaced by the
/// golden ratio, fixed saturation/value.
pub fn class_color(class_id: u32) -> [f64; 3] {
    let hue = (class_id as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
