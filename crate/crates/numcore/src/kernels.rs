//! Plain tensor kernels. The differentiable graph in [`crate::graph`] calls
//! into these for its forward passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn require_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::arg(format!("{op} expects a 2-D tensor, got {:?}", t.shape()))),
    }
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
    );
    Tensor::new(&[m, n], out)
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::arg(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Softmax over each row of `[r, c]` restricted to allowed entries; blocked
/// entries come out as exactly zero.
pub(crate) fn masked_softmax_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    cols: usize,
    allow: &[bool],
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ar = &allow[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for (&v, &a) in xr.iter().zip(ar) {
            if a {
                max = max.max(v);
            }
        }
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for j in 0..cols {
            if ar[j] {
                let e = (xr[j] - max).exp();
                or[j] = e;
                total += e;
            }
        }
        for v in or.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Per-row statistics saved for the layer norm backward pass.
pub(crate) struct LayerNormParts<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_parts<T: Scalar>(x: &[T], n: usize, gamma: &[T], beta: &[T], eps: T) -> LayerNormParts<T> {
    let rows = x.len() / n;
    let nf = T::c(n as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..n {
            let h = (xr[j] - mean) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormParts { out, xhat, rstd }
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let parts = layer_norm_parts(x.data(), n, gamma.data(), beta.data(), T::c(eps));
    Tensor::new(x.shape(), parts.out)
}

/// The four neighbouring cells of a continuous pixel coordinate, with their
/// bilinear weights. Cells outside the grid are reported as `None` (zero padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corners<T> {
    pub idx: [Option<usize>; 4],
    pub w: [T; 4],
    pub fx: T,
    pub fy: T,
}

pub(crate) fn corners<T: Scalar>(x: T, y: T, height: usize, width: usize) -> Corners<T> {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let cell = |cx: T, cy: T| -> Option<usize> {
        if cx < T::zero() || cy < T::zero() {
            return None;
        }
        let (cx, cy) = (cx.to_usize()?, cy.to_usize()?);
        (cx < width && cy < height).then_some(cy * width + cx)
    };
    let one = T::one();
    Corners {
        idx: [
            cell(x0, y0),
            cell(x0 + one, y0),
            cell(x0, y0 + one),
            cell(x0 + one, y0 + one),
        ],
        w: [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}

/// Bilinear interpolation of `f: [H, W, C]` at continuous pixel coordinates
/// `points: [P, 2]` given as `(x, y)`. Integer coordinates hit stored cells
/// exactly; cells outside the grid read as zero.
pub fn bilinear_sample<T: Scalar>(f: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let &[h, w, c] = f.shape() else {
        return Err(Error::arg(format!("bilinear_sample expects [H, W, C], got {:?}", f.shape())));
    };
    if points.ndim() != 2 || points.cols() != 2 {
        return Err(Error::arg(format!("points must be [P, 2], got {:?}", points.shape())));
    }
    let p = points.rows();
    let mut out = vec![T::zero(); p * c];
    for i in 0..p {
        let pt = points.row(i);
        let cr = corners(pt[0], pt[1], h, w);
        let dst = &mut out[i * c..(i + 1) * c];
        for k in 0..4 {
            if let Some(cell) = cr.idx[k] {
                let src = &f.data()[cell * c..(cell + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += cr.w[k] * s;
                }
            }
        }
    }
    Tensor::new(&[p, c], out)
}

/// Indices of the `k` largest scores in descending order; equal scores are
/// ordered by lower index first.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::arg(format!(
            "top_k: k = {k} exceeds {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("top_k"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("no NaN")
            .then(a.cmp(&b))
    };
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx)
}

/// Geometry of a 2-D convolution window sweep over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize * self.width + x as usize) * self.channels)
        }
    }
}

/// Unfolds `[H, W, C]` into `[Ho*Wo, k*k*C]` patches ordered `(ky, kx, c)`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo, c, k) = (g.out_height(), g.out_width(), g.channels, g.kernel);
    let plen = g.patch_len();
    let mut out = vec![T::zero(); ho * wo * plen];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
            for ky in 0..k {
                for kx in 0..k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the map.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo, c, k) = (g.out_height(), g.out_width(), g.channels, g.kernel);
    let plen = g.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
            for ky in 0..k {
                for kx in 0..k {
                    if let Some(dst) = g.source(oy, ox, ky, kx) {
                        let src = (ky * k + kx) * c;
                        for j in 0..c {
                            dx[dst + j] += row[src + j];
                        }
                    }
                }
            }
        }
    }
}

/// Spatial layout of one pyramid level inside a flattened `[M, d]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Level {
    pub height: usize,
    pub width: usize,
    pub start: usize,
}

impl Level {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Static layout of a multi-scale deformable sampling call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeformLayout {
    pub levels: Vec<Level>,
    pub heads: usize,
    pub points: usize,
}

impl DeformLayout {
    /// Sampling slots per head (levels × points).
    pub fn slots(&self) -> usize {
        self.levels.len() * self.points
    }
}

/// Multi-scale deformable sampling core.
///
/// `values: [M, d]`, `locs: [N, heads*levels*points*2]` normalized `(x, y)`,
/// `weights: [N, heads*levels*points]`. Output `[N, d]`: for each head the
/// weighted sum of bilinear samples of that head's channel slice.
pub(crate) fn ms_deform_forward<T: Scalar>(
    values: &[T],
    d: usize,
    locs: &[T],
    weights: &[T],
    n: usize,
    layout: &DeformLayout,
) -> Vec<T> {
    let dh = d / layout.heads;
    let slots = layout.slots();
    let mut out = vec![T::zero(); n * d];
    let half = T::c(0.5);
    for q in 0..n {
        for head in 0..layout.heads {
            let dst = &mut out[q * d + head * dh..q * d + (head + 1) * dh];
            for (li, lvl) in layout.levels.iter().enumerate() {
                for p in 0..layout.points {
                    let slot = (q * layout.heads + head) * slots + li * layout.points + p;
                    let wgt = weights[slot];
                    let px = locs[2 * slot] * T::c(lvl.width as f64) - half;
                    let py = locs[2 * slot + 1] * T::c(lvl.height as f64) - half;
                    let cr = corners(px, py, lvl.height, lvl.width);
                    for k in 0..4 {
                        if let Some(cell) = cr.idx[k] {
                            let base = (lvl.start + cell) * d + head * dh;
                            let coef = wgt * cr.w[k];
                            for (o, &v) in dst.iter_mut().zip(&values[base..base + dh]) {
                                *o += coef * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ms_deform_backward<T: Scalar>(
    values: &[T],
    d: usize,
    locs: &[T],
    weights: &[T],
    n: usize,
    layout: &DeformLayout,
    grad_out: &[T],
    mut dvalues: Option<&mut [T]>,
    mut dlocs: Option<&mut [T]>,
    mut dweights: Option<&mut [T]>,
) {
    let dh = d / layout.heads;
    let slots = layout.slots();
    let half = T::c(0.5);
    let one = T::one();
    for q in 0..n {
        for head in 0..layout.heads {
            let go = &grad_out[q * d + head * dh..q * d + (head + 1) * dh];
            for (li, lvl) in layout.levels.iter().enumerate() {
                let (wf, hf) = (T::c(lvl.width as f64), T::c(lvl.height as f64));
                for p in 0..layout.points {
                    let slot = (q * layout.heads + head) * slots + li * layout.points + p;
                    let wgt = weights[slot];
                    let px = locs[2 * slot] * wf - half;
                    let py = locs[2 * slot + 1] * hf - half;
                    let cr = corners(px, py, lvl.height, lvl.width);
                    // <grad_out, v_k> per corner
                    let mut dots = [T::zero(); 4];
                    for k in 0..4 {
                        if let Some(cell) = cr.idx[k] {
                            let base = (lvl.start + cell) * d + head * dh;
                            let vk = &values[base..base + dh];
                            dots[k] = go.iter().zip(vk).map(|(&a, &b)| a * b).sum();
                            if let Some(dv) = dvalues.as_deref_mut() {
                                let coef = wgt * cr.w[k];
                                for (x, &g) in dv[base..base + dh].iter_mut().zip(go) {
                                    *x += coef * g;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dweights.as_deref_mut() {
                        dw[slot] += (0..4).map(|k| cr.w[k] * dots[k]).sum::<T>();
                    }
                    if let Some(dl) = dlocs.as_deref_mut() {
                        let (fx, fy) = (cr.fx, cr.fy);
                        let dpx = (one - fy) * (dots[1] - dots[0]) + fy * (dots[3] - dots[2]);
                        let dpy = (one - fx) * (dots[2] - dots[0]) + fx * (dots[3] - dots[1]);
                        dl[2 * slot] += wgt * dpx * wf;
                        dl[2 * slot + 1] += wgt * dpy * hf;
                    }
                }
            }
        }
    }
}
