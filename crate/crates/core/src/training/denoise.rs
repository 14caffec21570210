//! Denoising queries: jittered copies of the ground truth with occasionally
//! flipped labels, in groups that only attend to themselves.

use efh_numcore::{Rng, Scalar, Tensor};
use rand::Rng as _;

use crate::config::DnConfig;
use crate::model::DnQueries;
use crate::training::GroundTruth;

/// Coordinates are clamped into `[DN_CLAMP, 1 − DN_CLAMP]`.
pub const DN_CLAMP: f64 = 1e-3;

/// `dn.groups` groups of `G` noised boxes. Centers move by up to
/// `box_noise · (w, h) / 2`, sizes scale within `[1 − noise, 1 + noise]`,
/// and each label flips to a different one with probability `label_flip`.
pub fn make_dn_queries<T: Scalar>(gt: &GroundTruth, dn: &DnConfig, num_labels: usize, rng: &mut Rng) -> DnQueries<T> {
    let groups = if gt.is_empty() { 0 } else { dn.groups };
    let g = gt.len();
    let mut boxes = Vec::with_capacity(groups * g * 4);
    let mut labels = Vec::with_capacity(groups * g);
    let noise = dn.box_noise;
    for _ in 0..groups {
        for (b, &l) in gt.boxes.iter().zip(&gt.labels) {
            let mut nb = *b;
            if noise > 0.0 {
                nb[0] += rng.random_range(-1.0..1.0) * noise * b[2] / 2.0;
                nb[1] += rng.random_range(-1.0..1.0) * noise * b[3] / 2.0;
                nb[2] *= rng.random_range(1.0 - noise..1.0 + noise);
                nb[3] *= rng.random_range(1.0 - noise..1.0 + noise);
            }
            boxes.extend(nb.map(|v| v.clamp(DN_CLAMP, 1.0 - DN_CLAMP)));
            let flip = dn.label_flip > 0.0 && num_labels > 1 && rng.random_bool(dn.label_flip);
            labels.push(if flip {
                let other = rng.random_range(0..num_labels - 1);
                if other >= l {
                    other + 1
                } else {
                    other
                }
            } else {
                l
            });
        }
    }
    let boxes = if boxes.is_empty() {
        Tensor::zeros(&[1, 4])
    } else {
        Tensor::from_f64(&[groups * g, 4], &boxes).expect("dn layout")
    };
    DnQueries {
        boxes,
        labels,
        groups,
        per_group: g,
    }
}
