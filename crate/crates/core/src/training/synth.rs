//! Seeded synthetic scenes of colored shapes on a dark, noisy background.

use efh_numcore::{seeded_rng, Rng, Scalar, Tensor};
use rand::Rng as _;

use crate::backbone::{Image, IMAGE_ALIGN};
use crate::error::{Error, Result};
use crate::training::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

/// The eight `"color shape"` labels, with their fill colors.
pub const VOCABULARY: [(&str, Shape, [f64; 3]); 8] = [
    ("red circle", Shape::Circle, [0.9, 0.15, 0.1]),
    ("red square", Shape::Square, [0.9, 0.15, 0.1]),
    ("green triangle", Shape::Triangle, [0.15, 0.8, 0.2]),
    ("green circle", Shape::Circle, [0.15, 0.8, 0.2]),
    ("blue square", Shape::Square, [0.15, 0.3, 0.95]),
    ("blue triangle", Shape::Triangle, [0.15, 0.3, 0.95]),
    ("yellow circle", Shape::Circle, [0.95, 0.9, 0.15]),
    ("yellow triangle", Shape::Triangle, [0.95, 0.9, 0.15]),
];

pub const MIN_SHAPES: usize = 1;
pub const MAX_SHAPES: usize = 6;
/// Shape side lengths in pixels, inclusive.
pub const SIZE_RANGE: (usize, usize) = (10, 20);
const BACKGROUND_MAX: f64 = 0.15;
const FILL_NOISE: f64 = 0.05;

pub fn label_names() -> Vec<String> {
    VOCABULARY.iter().map(|v| v.0.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T> {
    pub image: Image<T>,
    pub gt: GroundTruth,
    pub labels: Vec<String>,
}

/// Whether pixel `(x, y)` of an `s × s` cell belongs to the shape.
pub fn covers(shape: Shape, s: usize, x: usize, y: usize) -> bool {
    let (fx, fy, sf) = (x as f64 + 0.5, y as f64 + 0.5, s as f64);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = sf / 2.0;
            (fx - r).powi(2) + (fy - r).powi(2) <= r * r
        }
        // Apex at the top centre, base along the bottom row.
        Shape::Triangle => (fx - sf / 2.0).abs() <= fy / 2.0 + 0.5,
    }
}

fn draw(rng: &mut Rng, canvas: usize) -> (Vec<f64>, Vec<[usize; 5]>) {
    let mut px: Vec<f64> = (0..canvas * canvas * 3).map(|_| rng.random_range(0.0..BACKGROUND_MAX)).collect();
    let count = rng.random_range(MIN_SHAPES..=MAX_SHAPES);
    let mut placed: Vec<[usize; 5]> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..100 {
            let s = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
            let x0 = rng.random_range(0..=canvas - s);
            let y0 = rng.random_range(0..=canvas - s);
            let clear = placed
                .iter()
                .all(|p| x0 + s + 1 <= p[0] || p[0] + p[2] + 1 <= x0 || y0 + s + 1 <= p[1] || p[1] + p[2] + 1 <= y0);
            if !clear {
                continue;
            }
            let label = rng.random_range(0..VOCABULARY.len());
            let (_, shape, color) = VOCABULARY[label];
            for y in 0..s {
                for x in 0..s {
                    if covers(shape, s, x, y) {
                        let i = ((y0 + y) * canvas + x0 + x) * 3;
                        for c in 0..3 {
                            px[i + c] = (color[c] + rng.random_range(-FILL_NOISE..FILL_NOISE)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            placed.push([x0, y0, s, label, shape as usize]);
            break;
        }
    }
    (px, placed)
}

/// Tight pixel bounds `[x0, y0, x1, y1)` of a rasterized shape.
fn bounds(shape: Shape, s: usize) -> [usize; 4] {
    let mut b = [s, s, 0, 0];
    for y in 0..s {
        for x in 0..s {
            if covers(shape, s, x, y) {
                b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
            }
        }
    }
    b
}

/// Renders scene `seed` on a `canvas × canvas` image. Identical seeds give
/// identical images and ground truth.
pub fn generate_synthetic_scene<T: Scalar>(seed: u64, canvas: usize) -> Result<SyntheticScene<T>> {
    if canvas == 0 || canvas % IMAGE_ALIGN != 0 {
        return Err(Error::arg(format!("canvas {canvas} is not a positive multiple of {IMAGE_ALIGN}")));
    }
    let mut rng = seeded_rng(seed);
    let (px, placed) = draw(&mut rng, canvas);
    let c = canvas as f64;
    let mut boxes = Vec::with_capacity(placed.len());
    let mut labels = Vec::with_capacity(placed.len());
    for &[x0, y0, s, label, _] in &placed {
        let b = bounds(VOCABULARY[label].1, s);
        let (bx0, by0, bx1, by1) = ((x0 + b[0]) as f64, (y0 + b[1]) as f64, (x0 + b[2]) as f64, (y0 + b[3]) as f64);
        boxes.push([(bx0 + bx1) / 2.0 / c, (by0 + by1) / 2.0 / c, (bx1 - bx0) / c, (by1 - by0) / c]);
        labels.push(label);
    }
    let image = Image::new(Tensor::from_f64(&[canvas, canvas, 3], &px)?)?;
    Ok(SyntheticScene {
        image,
        gt: GroundTruth::new(&format!("synthetic-{seed}"), boxes, labels)?,
        labels: label_names(),
    })
}
