//! Single-threshold average precision.

use serde::Serialize;

use crate::decoder::Detection;
use crate::training::boxes::iou;
use crate::training::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    /// AP of each label; `None` for labels absent from the ground truth.
    pub per_label: Vec<Option<f64>>,
    /// Mean over labels that have ground truth.
    pub mean: f64,
}

/// Area under the precision envelope of a ranked list of hits.
fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut best = 0.0f64;
    let envelope: Vec<f64> = points
        .iter()
        .rev()
        .map(|&(_, p)| {
            best = best.max(p);
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Per-label AP at IoU `threshold`. Detections are ranked by descending
/// score (ties keep image order) and each takes the unmatched ground-truth
/// box of its label with the highest IoU, if that IoU reaches `threshold`.
pub fn evaluate_ap(detections: &[Vec<Detection>], gts: &[GroundTruth], num_labels: usize, threshold: f64) -> ApReport {
    assert_eq!(detections.len(), gts.len(), "one detection list per image");
    let mut per_label = Vec::with_capacity(num_labels);
    for label in 0..num_labels {
        let positives: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == label).count()).sum();
        if positives == 0 {
            per_label.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.label == label).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let g = &gts[img];
                let best = (0..g.len())
                    .filter(|&j| g.labels[j] == label && !used[img][j])
                    .map(|j| (j, iou(&d.bbox, &g.boxes[j])))
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, v)) if v >= threshold => {
                        used[img][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_label.push(Some(average_precision(&hits, positives)));
    }
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport { per_label, mean }
}
