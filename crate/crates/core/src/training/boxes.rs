//! Box geometry on normalized `(cx, cy, w, h)` boxes, plus its graph form.

use efh_numcore::{Scalar, Var};

use crate::error::{Error, Result};
use crate::params::Session;

pub type BoxCxCyWh = [f64; 4];

fn corners(b: &BoxCxCyWh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn parts(a: &BoxCxCyWh, b: &BoxCxCyWh) -> (f64, f64, f64) {
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    // Areas from corners, like the intersection, so a box overlaps itself
    // with IoU exactly 1.
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(ca) + area(cb) - inter;
    let enclosing = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    (inter, union, enclosing)
}

/// Intersection over union; `0` when either box is empty.
pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (inter, union, _) = parts(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]`.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> Result<f64> {
    if !(a[2] > 0.0 && a[3] > 0.0 && b[2] > 0.0 && b[3] > 0.0) {
        return Err(Error::arg(format!("giou needs positive sizes, got {a:?} and {b:?}")));
    }
    let (inter, union, enclosing) = parts(a, b);
    // The hull covers the union; rounding can make the gap a hair negative
    // when one box contains the other.
    Ok(inter / union - (enclosing - union).max(0.0) / enclosing)
}

/// Reads row `i` of an `[N, 4]` tensor as a box.
pub fn row_box<T: Scalar>(t: &efh_numcore::Tensor<T>, i: usize) -> BoxCxCyWh {
    let r = t.row(i);
    [r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()]
}

/// Rowwise GIoU of two `[n, 4]` box sets in the graph, `[n, 1]`.
pub fn giou_var<T: Scalar>(s: &mut Session<T>, a: Var, b: Var) -> Result<Var> {
    let g = &mut s.g;
    let mut xyxy = |v: Var| -> Result<[Var; 6]> {
        let cx = g.slice_last(v, 0, 1)?;
        let cy = g.slice_last(v, 1, 2)?;
        let w = g.slice_last(v, 2, 3)?;
        let h = g.slice_last(v, 3, 4)?;
        let hw = g.scale(w, 0.5)?;
        let hh = g.scale(h, 0.5)?;
        let [x0, y0, x1, y1] = [g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?];
        let (cw, ch) = (g.sub(x1, x0)?, g.sub(y1, y0)?);
        Ok([x0, y0, x1, y1, cw, ch])
    };
    let [ax0, ay0, ax1, ay1, aw, ah] = xyxy(a)?;
    let [bx0, by0, bx1, by1, bw, bh] = xyxy(b)?;
    let g = &mut s.g;
    let ix1 = g.minimum(ax1, bx1)?;
    let ix0 = g.maximum(ax0, bx0)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.maximum(ax1, bx1)?;
    let ex0 = g.minimum(ax0, bx0)?;
    let ew = g.sub(ex1, ex0)?;
    let ey1 = g.maximum(ay1, by1)?;
    let ey0 = g.minimum(ay0, by0)?;
    let eh = g.sub(ey1, ey0)?;
    let enc = g.mul(ew, eh)?;
    let gap = g.sub(enc, union)?;
    let frac = g.div(gap, enc)?;
    Ok(g.sub(iou, frac)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_examples() {
        let a = [0.25, 0.25, 0.1, 0.1];
        let b = [0.7, 0.7, 0.1, 0.1];
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let expected = -(0.3025 - 0.02) / 0.3025;
        assert!((giou(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 0.93388).abs() < 1e-5);
        assert!(giou(&a, &[0.5, 0.5, 0.0, 0.1]).is_err());
        assert_eq!(iou(&a, &b), 0.0);
    }
}
