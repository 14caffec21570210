use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Boolean allow/block mask for attention, `[rows, cols]`.
///
/// Every row allows at least one column; a fully blocked row has no softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape("AttentionMask", &[rows, cols], &[allow.len()]));
        }
        if let Some(r) = (0..rows).find(|&r| !allow[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(Error::arg(format!("attention mask row {r} blocks every column")));
        }
        Ok(Self {
            rows,
            cols,
            allow: allow.into(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, allow)
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true).expect("non-empty rows")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// Projection weights of one multi-head attention block, already bound in a
/// graph. Weights are `[d, d]` applied as `x · W`, biases `[d]`.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Output of [`multi_head_attention`] together with each head's post-softmax
/// weights `[n_q, n_k]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with separate query/key/value inputs.
///
/// `xq: [n_q, d]`, `xk: [n_k, d]`, `xv: [n_k, d]`; `mask`, when present, is
/// `[n_q, n_k]` and blocked entries receive exactly zero weight.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    xq: Var,
    xk: Var,
    xv: Var,
    p: &MhaVars,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let d = g.shape(xq)[1];
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {} heads",
            p.heads
        )));
    }
    let (nq, nk) = (g.shape(xq)[0], g.shape(xk)[0]);
    if let Some(m) = mask {
        if m.rows() != nq || m.cols() != nk {
            return Err(Error::shape("attention mask", &[m.rows(), m.cols()], &[nq, nk]));
        }
    }
    let dh = d / p.heads;
    let q = affine(g, xq, p.wq, p.bq)?;
    let k = affine(g, xk, p.wk, p.bk)?;
    let v = affine(g, xv, p.wv, p.bv)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if p.heads == 1 { q } else { g.slice_last(q, lo, hi)? };
        let kh = if p.heads == 1 { k } else { g.slice_last(k, lo, hi)? };
        let vh = if p.heads == 1 { v } else { g.slice_last(v, lo, hi)? };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let attn = match mask {
            Some(m) => g.masked_softmax(scores, m.as_slice())?,
            None => g.softmax(scores, 1)?,
        };
        weights.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
    let out = affine(g, cat, p.wo, p.bo)?;
    Ok(AttentionOutput { out, weights })
}

/// Multi-head self-attention over the rows of `x: [n, d]`.
pub fn multi_head_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &MhaVars,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    Ok(multi_head_attention(g, x, x, x, p, mask)?.out)
}
