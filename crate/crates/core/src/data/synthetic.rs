//! Binary shape renderer over an exhaustive factor grid.

use serde::{Deserialize, Serialize};

use super::{FactorDataset, Pixels};
use crate::error::{Error, Result};

pub const SUPPORTED_IMAGE_SIZES: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];
}

/// Number of values per axis. An axis of size 1 is held constant and is not a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGrid {
    pub positions_x: usize,
    pub positions_y: usize,
    pub scales: usize,
    pub shapes: usize,
}

impl SyntheticGrid {
    /// 8 x 8 positions and 4 scales of a square: 256 images with three factors.
    pub const DESK: SyntheticGrid = SyntheticGrid { positions_x: 8, positions_y: 8, scales: 4, shapes: 1 };

    /// `(name, size)` per axis in factor order.
    fn axes(&self) -> [(&'static str, usize); 4] {
        [("shape", self.shapes), ("scale", self.scales), ("position_x", self.positions_x), ("position_y", self.positions_y)]
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.axes().iter().filter(|(_, n)| *n > 1).map(|(name, _)| name.to_string()).collect()
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.axes().iter().map(|(_, n)| *n).filter(|&n| n > 1).collect()
    }

    pub fn num_images(&self) -> usize {
        self.axes().iter().map(|(_, n)| n).product()
    }
}

/// A shape that was cut at the image border.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderWarning {
    pub index: usize,
    pub message: String,
}

fn side_lengths(image_size: usize, scales: usize) -> Vec<usize> {
    let (lo, hi) = (image_size as f64 / 4.0, image_size as f64 / 2.0);
    if scales == 1 {
        return vec![hi as usize];
    }
    (0..scales)
        .map(|k| (lo + (hi - lo) * k as f64 / (scales - 1) as f64).round() as usize)
        .collect()
}

fn offsets(image_size: usize, count: usize, largest: usize) -> Vec<usize> {
    let room = image_size - largest;
    if count == 1 {
        return vec![room / 2];
    }
    let stride = (room / (count - 1)).max(1);
    (0..count).map(|i| i * stride).collect()
}

/// Rasterizes `shape` into the `side x side` box at `(left, top)`; returns whether it was clipped.
pub fn render_shape(canvas: &mut [u8], size: usize, shape: Shape, left: usize, top: usize, side: usize) -> bool {
    let half = side as f64 / 2.0;
    let (cx, cy) = (left as f64 + half, top as f64 + half);
    let mut clipped = false;
    for row in top..top + side {
        for col in left..left + side {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let inside = match shape {
                Shape::Square => true,
                Shape::Ellipse => (px - cx).powi(2) + (py - cy).powi(2) <= half * half,
                // Apex at the top edge, base along the bottom edge.
                Shape::Triangle => (px - cx).abs() <= (py - top as f64) / 2.0,
            };
            if !inside {
                continue;
            }
            if row < size && col < size {
                canvas[row * size + col] = 1;
            } else {
                clipped = true;
            }
        }
    }
    clipped
}

/// Renders every grid combination as a binary `1 x size x size` image.
///
/// Rows follow mixed-radix order over (shape, scale, x, y), last fastest, with
/// constant axes skipped. Any shape cut by the border yields a warning.
pub fn generate_synthetic(
    grid: &SyntheticGrid,
    image_size: usize,
    seed: u64,
) -> Result<(FactorDataset, Vec<RenderWarning>)> {
    // Rendering is deterministic; the seed is kept for provenance in manifests.
    let _ = seed;
    if !SUPPORTED_IMAGE_SIZES.contains(&image_size) {
        return Err(Error::invalid(format!("image size must be one of {SUPPORTED_IMAGE_SIZES:?}, got {image_size}")));
    }
    if grid.axes().iter().any(|(_, n)| *n == 0) {
        return Err(Error::invalid("every grid axis needs at least one value"));
    }
    if grid.shapes > Shape::ALL.len() {
        return Err(Error::invalid(format!("at most {} shapes are available", Shape::ALL.len())));
    }
    let names = grid.factor_names();
    if names.is_empty() {
        return Err(Error::invalid("grid has no varying factor"));
    }
    let sides = side_lengths(image_size, grid.scales);
    let largest = *sides.iter().max().expect("at least one scale");
    let xs = offsets(image_size, grid.positions_x, largest);
    let ys = offsets(image_size, grid.positions_y, largest);

    let n = grid.num_images();
    let image_len = image_size * image_size;
    let mut pixels = vec![0u8; n * image_len];
    let mut factors = Vec::with_capacity(n * names.len());
    let mut warnings = Vec::new();
    let mut index = 0;
    for shape in 0..grid.shapes {
        for scale in 0..grid.scales {
            for x in 0..grid.positions_x {
                for y in 0..grid.positions_y {
                    let canvas = &mut pixels[index * image_len..(index + 1) * image_len];
                    if render_shape(canvas, image_size, Shape::ALL[shape], xs[x], ys[y], sides[scale]) {
                        warnings.push(RenderWarning {
                            index,
                            message: format!(
                                "shape at ({}, {}) with side {} clamped to {image_size}x{image_size}",
                                xs[x], ys[y], sides[scale]
                            ),
                        });
                    }
                    for (value, size) in [(shape, grid.shapes), (scale, grid.scales), (x, grid.positions_x), (y, grid.positions_y)] {
                        if size > 1 {
                            factors.push(value as u32);
                        }
                    }
                    index += 1;
                }
            }
        }
    }
    let ds = FactorDataset::new(
        Pixels::Bytes { data: pixels, scale: 1.0 },
        (1, image_size, image_size),
        factors,
        grid.factor_sizes(),
        names,
    )?;
    Ok((ds, warnings))
}
