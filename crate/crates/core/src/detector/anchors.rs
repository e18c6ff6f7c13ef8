use super::boxes::Box2D;

/// Square anchors on a regular feature grid, one per (scale, cell).
///
/// Anchor centers sit at cell centers (always inside the image); every
/// anchor is clipped to image bounds before any use. Storage order matches
/// the RPN head layout: index `a*grid*grid + y*grid + x`.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub image_size: usize,
    pub stride: usize,
    pub grid: usize,
    pub sides: Vec<f64>,
    anchors: Vec<Box2D>,
}

impl AnchorGrid {
    pub fn new(image_size: usize, stride: usize, sides: &[f64]) -> Self {
        assert!(stride > 0 && image_size % stride == 0);
        let grid = image_size / stride;
        let mut anchors = Vec::with_capacity(sides.len() * grid * grid);
        for &side in sides {
            for y in 0..grid {
                for x in 0..grid {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    let b = Box2D::new(
                        cx - side / 2.0,
                        cy - side / 2.0,
                        cx + side / 2.0,
                        cy + side / 2.0,
                    );
                    anchors.push(b.clip(image_size as f64, image_size as f64));
                }
            }
        }
        AnchorGrid {
            image_size,
            stride,
            grid,
            sides: sides.to_vec(),
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn all(&self) -> &[Box2D] {
        &self.anchors
    }

    pub fn get(&self, index: usize) -> &Box2D {
        &self.anchors[index]
    }

    /// Decompose a flat anchor index into (scale, y, x).
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let g2 = self.grid * self.grid;
        (index / g2, (index % g2) / self.grid, index % self.grid)
    }

    /// Flat index of the anchor at (scale, y, x).
    pub fn index(&self, scale: usize, y: usize, x: usize) -> usize {
        (scale * self.grid + y) * self.grid + x
    }
}
