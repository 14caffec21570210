//! Reverse-mode differentiation over an append-only operation tape.
//!
//! A [`Graph`] owns every intermediate value. Operations return [`Var`]
//! handles; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients in a fixed order, so results are deterministic. A graph is a
//! single-threaded recording context.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, DeformLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceRows(Var, usize),
    SliceLast(Var, usize),
    Im2Col(Var, ConvGeometry),
    Upsample2x(Var),
    BilinearSample(Var, Var),
    MsDeform {
        values: Var,
        locs: Var,
        weights: Var,
        layout: Arc<DeformLayout>,
    },
    BoxLocs(Var, Var),
    RefineSigmoid(Var, Var),
    BceLogits(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for differentiable computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower clamp for boxes emitted by [`Graph::refine_sigmoid`].
pub const BOX_EPS: f64 = 1e-6;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enrolls `t` for differentiation.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Records `t` as a detached input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let v = self.zip_map(a, b, |x, y| if x >= y { x } else { y });
        self.push("maximum", v, Op::Maximum(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let v = self.zip_map(a, b, |x, y| if x <= y { x } else { y });
        self.push("minimum", v, Op::Minimum(a, b), &[a, b])
    }

    /// Adds `bias: [n]` to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_exact_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push("add_row", v, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let &[m, n] = x.shape() else {
            return Err(Error::arg(format!("transpose expects 2-D, got {:?}", x.shape())));
        };
        let src = x.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(self.value(a), axis)?;
        self.push("softmax", v, Op::Softmax(a, axis), &[a])
    }

    /// Row softmax of `a: [r, c]` over entries where `allow` is set.
    pub fn masked_softmax(&mut self, a: Var, allow: &[bool]) -> Result<Var> {
        let x = self.value(a);
        let &[r, c] = x.shape() else {
            return Err(Error::arg("masked_softmax expects 2-D input"));
        };
        if allow.len() != r * c {
            return Err(Error::shape("masked_softmax", x.shape(), &[allow.len()]));
        }
        if allow.chunks_exact(c).any(|row| !row.iter().any(|&b| b)) {
            return Err(Error::arg("masked_softmax: fully blocked row"));
        }
        let v = Tensor::new(&[r, c], kernels::masked_softmax_rows(x.data(), r, c, allow))?;
        self.push("masked_softmax", v, Op::MaskedSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let parts = kernels::layer_norm_parts(
            self.value(x).data(),
            n,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::c(eps),
        );
        let v = Tensor::new(self.shape(x), parts.out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: parts.xhat,
            rstd: parts.rstd,
        };
        self.push("layer_norm", v, op, &[x, gamma, beta])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Selects rows along the first axis (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape()[0];
        let width = x.len() / rows;
        if idx.is_empty() {
            return Err(Error::arg("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::arg(format!("gather_rows: index {bad} >= {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::new(&shape, out)?;
        self.push("gather_rows", v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat_rows: no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(&shape, out)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat_last: no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(&shape, out)?;
        self.push("concat_last", v, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Rows `start..end` of the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape()[0];
        if start >= end || end > rows {
            return Err(Error::arg(format!("slice_rows {start}..{end} of {rows}")));
        }
        let width = x.len() / rows;
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(&shape, x.data()[start * width..end * width].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if start >= end || end > cols {
            return Err(Error::arg(format!("slice_last {start}..{end} of {cols}")));
        }
        let mut out = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let v = Tensor::new(&shape, out)?;
        self.push("slice_last", v, Op::SliceLast(a, start), &[a])
    }

    /// Unfolds an `[H, W, C]` map into `[Ho*Wo, k*k*C]` convolution patches.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let &[h, w, c] = self.shape(x) else {
            return Err(Error::arg(format!("im2col expects [H, W, C], got {:?}", self.shape(x))));
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::arg(format!(
                "im2col: kernel {kernel} stride {stride} pad {pad} on {h}x{w}"
            )));
        }
        let geo = ConvGeometry {
            height: h,
            width: w,
            channels: c,
            kernel,
            stride,
            pad,
        };
        let cols = kernels::im2col(self.value(x).data(), &geo);
        let v = Tensor::new(&[geo.out_height() * geo.out_width(), geo.patch_len()], cols)?;
        self.push("im2col", v, Op::Im2Col(x, geo), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let &[h, w, c] = self.shape(x) else {
            return Err(Error::arg("upsample2x expects [H, W, C]"));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let s = ((y / 2) * w + xx / 2) * c;
                let d = (y * 2 * w + xx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let v = Tensor::new(&[2 * h, 2 * w, c], out)?;
        self.push("upsample2x", v, Op::Upsample2x(x), &[x])
    }

    /// Differentiable [`kernels::bilinear_sample`].
    pub fn bilinear_sample(&mut self, f: Var, points: Var) -> Result<Var> {
        let v = kernels::bilinear_sample(self.value(f), self.value(points))?;
        self.push("bilinear_sample", v, Op::BilinearSample(f, points), &[f, points])
    }

    /// Multi-scale deformable sampling; see [`kernels::DeformLayout`].
    pub fn ms_deform_sample(
        &mut self,
        values: Var,
        locs: Var,
        weights: Var,
        layout: Arc<DeformLayout>,
    ) -> Result<Var> {
        let vs = self.shape(values);
        if vs.len() != 2 || vs[1] % layout.heads != 0 {
            return Err(Error::arg(format!("deform values {vs:?} for {} heads", layout.heads)));
        }
        let (m, d) = (vs[0], vs[1]);
        if layout.levels.iter().map(|l| l.start + l.len()).max().unwrap_or(0) > m {
            return Err(Error::arg("deform levels exceed value rows"));
        }
        let n = self.shape(locs)[0];
        let per_query = layout.heads * layout.slots();
        if self.shape(locs) != [n, per_query * 2] || self.shape(weights) != [n, per_query] {
            return Err(Error::shape("ms_deform_sample", self.shape(locs), self.shape(weights)));
        }
        let out = kernels::ms_deform_forward(
            self.value(values).data(),
            d,
            self.value(locs).data(),
            self.value(weights).data(),
            n,
            &layout,
        );
        let v = Tensor::new(&[n, d], out)?;
        let op = Op::MsDeform {
            values,
            locs,
            weights,
            layout,
        };
        self.push("ms_deform_sample", v, op, &[values, locs, weights])
    }

    /// Sampling locations around box centers: `refs: [N, 4]` (cx, cy, w, h),
    /// `offsets: [N, 2K]` as `(dx, dy)` pairs scaled by half the box size.
    pub fn box_locations(&mut self, refs: Var, offsets: Var) -> Result<Var> {
        let (r, o) = (self.value(refs), self.value(offsets));
        if r.ndim() != 2 || r.cols() != 4 || o.ndim() != 2 || o.rows() != r.rows() || o.cols() % 2 != 0 {
            return Err(Error::shape("box_locations", r.shape(), o.shape()));
        }
        let half = T::c(0.5);
        let mut out = o.clone();
        let k2 = o.cols();
        for i in 0..r.rows() {
            let b = r.row(i);
            let row = out.row_mut(i);
            for j in (0..k2).step_by(2) {
                row[j] = b[0] + row[j] * b[2] * half;
                row[j + 1] = b[1] + row[j + 1] * b[3] * half;
            }
        }
        self.push("box_locations", out, Op::BoxLocs(refs, offsets), &[refs, offsets])
    }

    /// `sigmoid(delta + logit(base))`, elementwise, clamped into
    /// `[BOX_EPS, 1 - BOX_EPS]`. A zero `delta` returns `base` unchanged.
    pub fn refine_sigmoid(&mut self, delta: Var, base: Var) -> Result<Var> {
        self.same_shape("refine_sigmoid", delta, base)?;
        let (lo, hi) = (T::c(BOX_EPS), T::one() - T::c(BOX_EPS));
        let v = self.zip_map(delta, base, |d, b| {
            // b + (1 - b) need not round to exactly 1, so zero is special-cased.
            let y = if d == T::zero() { b } else { b / (b + (T::one() - b) * (-d).exp()) };
            y.max(lo).min(hi)
        });
        self.push("refine_sigmoid", v, Op::RefineSigmoid(delta, base), &[delta, base])
    }

    /// Elementwise binary cross-entropy on logits against fixed soft targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", x.shape(), targets.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push("bce_with_logits", v, Op::BceLogits(logits, targets), &[logits])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![T::one()])?);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let y = &node.value;
        // Allocates the gradient buffer for `v` if absent and returns it.
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Tensor<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'a mut [T] {
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
                .data_mut()
        }
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, f: &dyn Fn(usize) -> T| {
            if wants(v) {
                for (j, x) in slot(grads, nodes, v).iter_mut().enumerate() {
                    *x += f(j);
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|j| gd[j]);
                acc(grads, *b, &|j| gd[j]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|j| gd[j]);
                acc(grads, *b, &|j| -gd[j]);
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(*a).data(), val(*b).data());
                acc(grads, *a, &|j| gd[j] * z[j]);
                acc(grads, *b, &|j| gd[j] * x[j]);
            }
            Op::Div(a, b) => {
                let (x, z) = (val(*a).data(), val(*b).data());
                acc(grads, *a, &|j| gd[j] / z[j]);
                acc(grads, *b, &|j| -gd[j] * x[j] / (z[j] * z[j]));
            }
            Op::Maximum(a, b) => {
                let (x, z) = (val(*a).data(), val(*b).data());
                acc(grads, *a, &|j| if x[j] >= z[j] { gd[j] } else { T::zero() });
                acc(grads, *b, &|j| if x[j] >= z[j] { T::zero() } else { gd[j] });
            }
            Op::Minimum(a, b) => {
                let (x, z) = (val(*a).data(), val(*b).data());
                acc(grads, *a, &|j| if x[j] <= z[j] { gd[j] } else { T::zero() });
                acc(grads, *b, &|j| if x[j] <= z[j] { T::zero() } else { gd[j] });
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, &|j| gd[j]);
                if wants(*bias) {
                    let n = g.cols();
                    let gb = slot(grads, nodes, *bias);
                    for row in gd.chunks_exact(n) {
                        for (x, &r) in gb.iter_mut().zip(row) {
                            *x += r;
                        }
                    }
                }
            }
            Op::Scale(a, c) => acc(grads, *a, &|j| gd[j] * *c),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, &|j| gd[j]),
            Op::MatMul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = z.shape()[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, gd, (n as isize, 1), z.data(), (1, n as isize), T::one(), slot(grads, nodes, *a));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, x.data(), (1, k as isize), gd, (n as isize, 1), T::one(), slot(grads, nodes, *b));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                // y is [m, n], input is [n, m]
                acc(grads, *a, &|j| gd[(j % m) * n + j / m]);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(grads, *a, &|j| if x[j] > T::zero() { gd[j] } else { T::zero() });
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                acc(grads, *a, &|j| {
                    let s = sigmoid(x[j]);
                    gd[j] * s * (T::one() + x[j] * (T::one() - s))
                });
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                acc(grads, *a, &|j| gd[j] * yd[j] * (T::one() - yd[j]));
            }
            Op::Exp(a) => {
                let yd = y.data();
                acc(grads, *a, &|j| gd[j] * yd[j]);
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(grads, *a, &|j| gd[j] / x[j]);
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                acc(grads, *a, &|j| {
                    if x[j] > T::zero() {
                        gd[j]
                    } else if x[j] < T::zero() {
                        -gd[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Softmax(a, axis) => {
                if wants(*a) {
                    let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
                    let yd = y.data();
                    let ga = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                if wants(*a) {
                    let c = y.cols();
                    let yd = y.data();
                    let ga = slot(grads, nodes, *a);
                    for r in 0..y.rows() {
                        let (yr, gr) = (&yd[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = y.cols();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (row, hrow) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for row in gd.chunks_exact(n) {
                        for j in 0..n {
                            gb[j] += row[j];
                        }
                    }
                }
                if wants(*x) {
                    let nf = T::c(n as f64);
                    let gx = slot(grads, nodes, *x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..n {
                            let gh = gr[j] * gam[j];
                            mean_g += gh;
                            mean_gh += gh * hr[j];
                        }
                        mean_g /= nf;
                        mean_gh /= nf;
                        for j in 0..n {
                            let gh = gr[j] * gam[j];
                            gx[r * n + j] += rs * (gh - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(grads, *a, &|_| g0);
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let width = y.len() / idx.len();
                    let ga = slot(grads, nodes, *a);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..width {
                            ga[i * width + j] += gd[r * width + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(grads, p, &|j| gd[off + j]);
                    off += len;
                }
            }
            Op::ConcatLast(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(grads, p, &|j| gd[(j / c) * total + off + j % c]);
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let width = val(*a).len() / val(*a).shape()[0];
                let (lo, hi) = (start * width, start * width + y.len());
                acc(grads, *a, &|j| if j >= lo && j < hi { gd[j - lo] } else { T::zero() });
            }
            Op::SliceLast(a, start) => {
                if wants(*a) {
                    let (c_in, c_out) = (val(*a).cols(), y.cols());
                    let ga = slot(grads, nodes, *a);
                    for r in 0..y.rows() {
                        for j in 0..c_out {
                            ga[r * c_in + start + j] += gd[r * c_out + j];
                        }
                    }
                }
            }
            Op::Im2Col(x, geo) => {
                if wants(*x) {
                    kernels::col2im_add(gd, geo, slot(grads, nodes, *x));
                }
            }
            Op::Upsample2x(x) => {
                if wants(*x) {
                    let (h2, w2, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                    let w = w2 / 2;
                    let gx = slot(grads, nodes, *x);
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let d = ((yy / 2) * w + xx / 2) * c;
                            let s = (yy * w2 + xx) * c;
                            for j in 0..c {
                                gx[d + j] += gd[s + j];
                            }
                        }
                    }
                }
            }
            Op::BilinearSample(f, pts) => {
                let (fv, pv) = (val(*f), val(*pts));
                let (h, w, c) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                let p = pv.rows();
                let corners: Vec<_> = (0..p)
                    .map(|i| kernels::corners(pv.row(i)[0], pv.row(i)[1], h, w))
                    .collect();
                if wants(*f) {
                    let gf = slot(grads, nodes, *f);
                    for (i, cr) in corners.iter().enumerate() {
                        for k in 0..4 {
                            if let Some(cell) = cr.idx[k] {
                                for j in 0..c {
                                    gf[cell * c + j] += cr.w[k] * gd[i * c + j];
                                }
                            }
                        }
                    }
                }
                if wants(*pts) {
                    let gp = slot(grads, nodes, *pts);
                    for (i, cr) in corners.iter().enumerate() {
                        let mut dots = [T::zero(); 4];
                        for k in 0..4 {
                            if let Some(cell) = cr.idx[k] {
                                dots[k] = (0..c).map(|j| fv.data()[cell * c + j] * gd[i * c + j]).sum();
                            }
                        }
                        let one = T::one();
                        gp[2 * i] += (one - cr.fy) * (dots[1] - dots[0]) + cr.fy * (dots[3] - dots[2]);
                        gp[2 * i + 1] += (one - cr.fx) * (dots[2] - dots[0]) + cr.fx * (dots[3] - dots[1]);
                    }
                }
            }
            Op::MsDeform {
                values,
                locs,
                weights,
                layout,
            } => {
                let d = val(*values).cols();
                let n = y.rows();
                let take = |grads: &mut [Option<Tensor<T>>], v: Var| -> Option<Tensor<T>> {
                    wants(v).then(|| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(val(v).shape())))
                };
                let mut dv = take(grads, *values);
                let mut dl = take(grads, *locs);
                let mut dw = take(grads, *weights);
                kernels::ms_deform_backward(
                    val(*values).data(),
                    d,
                    val(*locs).data(),
                    val(*weights).data(),
                    n,
                    layout,
                    gd,
                    dv.as_mut().map(|t| t.data_mut()),
                    dl.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*values, dv), (*locs, dl), (*weights, dw)] {
                    if let Some(t) = t {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::BoxLocs(refs, offs) => {
                let (r, o) = (val(*refs), val(*offs));
                let k2 = o.cols();
                let half = T::c(0.5);
                if wants(*refs) {
                    let gr = slot(grads, nodes, *refs);
                    for i in 0..r.rows() {
                        let orow = o.row(i);
                        for j in (0..k2).step_by(2) {
                            let (gx, gy) = (gd[i * k2 + j], gd[i * k2 + j + 1]);
                            gr[4 * i] += gx;
                            gr[4 * i + 1] += gy;
                            gr[4 * i + 2] += gx * orow[j] * half;
                            gr[4 * i + 3] += gy * orow[j + 1] * half;
                        }
                    }
                }
                if wants(*offs) {
                    let rd = r.data();
                    acc(grads, *offs, &|j| {
                        let i = j / k2;
                        let size = if j % 2 == 0 { rd[4 * i + 2] } else { rd[4 * i + 3] };
                        gd[j] * size * half
                    });
                }
            }
            Op::RefineSigmoid(delta, base) => {
                let yd = y.data();
                let bd = val(*base).data();
                acc(grads, *delta, &|j| gd[j] * yd[j] * (T::one() - yd[j]));
                acc(grads, *base, &|j| {
                    let b = bd[j];
                    gd[j] * yd[j] * (T::one() - yd[j]) / (b * (T::one() - b))
                });
            }
            Op::BceLogits(a, t) => {
                let x = val(*a).data();
                let td = t.data();
                acc(grads, *a, &|j| gd[j] * (sigmoid(x[j]) - td[j]));
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`]: gradients for every enrolled tensor
/// reachable from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for detached inputs and for enrolled tensors the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
