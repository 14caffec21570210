//! Matching, losses, denoising, data conversion, synthetic scenes,
//! optimization and evaluation.

pub mod boxes;
pub mod denoise;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod optim;
pub mod synth;
pub mod tasks;
pub mod trainer;

use crate::error::{Error, Result};
use boxes::BoxCxCyWh;

/// Annotated boxes of one image with indices into its label list.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: String,
    pub boxes: Vec<BoxCxCyWh>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    /// Boxes must have centers in `[0, 1]` and sizes in `(0, 1]`.
    pub fn new(image: &str, boxes: Vec<BoxCxCyWh>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::arg(format!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        for b in &boxes {
            let ok = (0.0..=1.0).contains(&b[0])
                && (0.0..=1.0).contains(&b[1])
                && b[2] > 0.0
                && b[2] <= 1.0
                && b[3] > 0.0
                && b[3] <= 1.0;
            if !ok {
                return Err(Error::arg(format!("box {b:?} is outside the unit square")));
            }
        }
        Ok(Self {
            image: image.to_string(),
            boxes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}
