//! Optimal one-to-one assignment of ground truth to predictions.

use efh_numcore::{Scalar, Tensor};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::training::boxes::{giou, row_box};
use crate::training::GroundTruth;

/// Minimum-cost assignment of every row to a distinct column of a row-major
/// `rows x cols` cost matrix (`rows <= cols`). Returns the column of each
/// row. Shortest augmenting paths with potentials, `O(rows² · cols)`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::arg(format!("cannot match {rows} rows into {cols} columns")));
    }
    if cost.len() != rows * cols {
        return Err(Error::arg("cost matrix size disagrees with its shape"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::arg("cost matrix has non-finite entries"));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    let at = |r: usize, c: usize| cost[(r - 1) * cols + (c - 1)];
    // 1-based; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut c0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[c0] = true;
            let r0 = owner[c0];
            let mut delta = f64::INFINITY;
            let mut c1 = 0;
            for c in 1..=cols {
                if used[c] {
                    continue;
                }
                let reduced = at(r0, c) - u[r0] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = c0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    c1 = c;
                }
            }
            for c in 0..=cols {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            c0 = c1;
            if owner[c0] == 0 {
                break;
            }
        }
        loop {
            let c1 = way[c0];
            owner[c0] = owner[c1];
            c0 = c1;
            if c0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for c in 1..=cols {
        if owner[c] != 0 {
            out[owner[c] - 1] = c - 1;
        }
    }
    Ok(out)
}

/// `[G, N]` matching cost: `λcls(1 − σ(logit of the gt label)) + λL1‖b − b̂‖₁
/// + λgiou(1 − GIoU)`.
pub fn matching_cost<T: Scalar>(
    boxes: &Tensor<T>,
    logits: &Tensor<T>,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let n = boxes.rows();
    if logits.rows() != n {
        return Err(Error::arg("boxes and logits disagree on query count"));
    }
    let mut cost = Vec::with_capacity(gt.len() * n);
    for (g, gb) in gt.boxes.iter().enumerate() {
        let label = gt.labels[g];
        for q in 0..n {
            let pb = row_box(boxes, q);
            let p = 1.0 / (1.0 + (-logits.row(q)[label].as_f64()).exp());
            let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            cost.push(w.cls * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - giou(&pb, gb)?));
        }
    }
    Ok(cost)
}

/// Query assigned to each ground-truth box, as `(query, gt)` pairs in gt
/// order.
pub fn hungarian_match<T: Scalar>(
    boxes: &Tensor<T>,
    logits: &Tensor<T>,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    let n = boxes.rows();
    if gt.len() > n {
        return Err(Error::arg(format!("{} ground-truth boxes exceed {n} queries", gt.len())));
    }
    let cost = matching_cost(boxes, logits, gt, w)?;
    let cols = hungarian(&cost, gt.len(), n)?;
    Ok(cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect())
}
