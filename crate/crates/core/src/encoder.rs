//! Language-aware hybrid encoder: intra-scale attention on P5, convolutional
//! cross-scale fusion, per-position candidate boxes, label relevance and
//! top-K query selection.

use efh_numcore::{multi_head_attention, top_k, Level, Scalar, Tensor, Var};

use crate::backbone::PyramidVars;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Conv2d, FeedForward, LayerNorm, Linear, Mlp};
use crate::params::Session;

/// Anchor side length at pyramid level `l` (0 = P3) is `ANCHOR_BASE * 2^l`.
pub const ANCHOR_BASE: f64 = 0.05;
pub const COSINE_EPS: f64 = 1e-8;
const POS_TEMPERATURE: f64 = 10000.0;

/// Fixed 2-D sin-cos encoding `[h*w, d]`: for each of `d/4` frequencies,
/// `sin(x ω), cos(x ω), sin(y ω), cos(y ω)` blocks.
pub fn sincos_2d<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let q = d / 4;
    let omega: Vec<f64> = (0..q).map(|i| 1.0 / POS_TEMPERATURE.powf(i as f64 / q as f64)).collect();
    Tensor::from_fn(&[h * w, d], |i| {
        let (pos, c) = (i / d, i % d);
        let (y, x) = ((pos / w) as f64, (pos % w) as f64);
        let (block, k) = (c / q, c % q);
        T::c(match block {
            0 => (x * omega[k]).sin(),
            1 => (x * omega[k]).cos(),
            2 => (y * omega[k]).sin(),
            _ => (y * omega[k]).cos(),
        })
    })
}

/// Cell-centre anchors `[M, 4]` for the given levels, P3 first.
pub fn anchors<T: Scalar>(levels: &[Level]) -> Tensor<T> {
    let mut data = Vec::new();
    for (l, lvl) in levels.iter().enumerate() {
        let side = ANCHOR_BASE * f64::powi(2.0, l as i32);
        for y in 0..lvl.height {
            for x in 0..lvl.width {
                data.extend([
                    (x as f64 + 0.5) / lvl.width as f64,
                    (y as f64 + 0.5) / lvl.height as f64,
                    side,
                    side,
                ]);
            }
        }
    }
    Tensor::from_f64(&[data.len() / 4, 4], &data).expect("anchor layout")
}

/// Flattened encoder output `O: [M, d]` with its per-level layout.
#[derive(Debug, Clone)]
pub struct EncodedFeatures<T> {
    pub o: Var,
    pub levels: Vec<Level>,
    pub anchors: Tensor<T>,
}

impl<T> EncodedFeatures<T> {
    pub fn len(&self) -> usize {
        self.levels.iter().map(Level::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pyramid level (0 = P3) of flattened position `i`.
    pub fn level_of(&self, i: usize) -> usize {
        self.levels.iter().position(|l| i < l.start + l.len()).expect("position in range")
    }
}

/// Selected proposals: indices into `O` and their boxes `[K, 4]`.
#[derive(Debug, Clone, Copy)]
pub struct QueryProposals {
    pub boxes: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Aifi {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl Aifi {
    fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("aifi");
        Self {
            attn: Attention::new(&mut s, "attn", cfg.d_model, cfg.heads),
            ln1: LayerNorm::new(&mut s, "ln1", cfg.d_model),
            ffn: FeedForward::new(&mut s, "ffn", cfg.d_model, cfg.ffn_dim),
            ln2: LayerNorm::new(&mut s, "ln2", cfg.d_model),
        }
    }

    /// `[h, w, d] -> [h, w, d]`. With `positional = false` the sin-cos terms
    /// are left out, which makes the block permutation-equivariant.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, p5: Var, positional: bool) -> Result<Var> {
        let &[h, w, d] = s.g.shape(p5) else {
            return Err(Error::arg("aifi expects [h, w, d]"));
        };
        let x = s.g.reshape(p5, &[h * w, d])?;
        let qk = if positional {
            let pos = s.constant(sincos_2d(h, w, d));
            s.g.add(x, pos)?
        } else {
            x
        };
        let mha = self.attn.bind(s);
        let a = multi_head_attention(&mut s.g, qk, qk, x, &mha, None)?.out;
        let x = s.g.add(x, a)?;
        let x = self.ln1.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let x = s.g.add(x, f)?;
        let x = self.ln2.forward(s, x)?;
        Ok(s.g.reshape(x, &[h, w, d])?)
    }
}

/// concat → 1×1 conv → SiLU → 3×3 conv → SiLU.
#[derive(Debug, Clone, Copy)]
struct Fusion {
    reduce: Conv2d,
    mix: Conv2d,
}

impl Fusion {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            reduce: Conv2d::new(&mut s, "reduce", 2 * d, d, 1, 1, 0),
            mix: Conv2d::new(&mut s, "mix", d, d, 3, 1, 1),
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<T>, a: Var, b: Var) -> Result<Var> {
        let x = s.g.concat_last(&[a, b])?;
        let x = self.reduce.forward(s, x)?;
        let x = s.g.silu(x)?;
        let x = self.mix.forward(s, x)?;
        Ok(s.g.silu(x)?)
    }

    fn conv_params(&self) -> [Conv2d; 2] {
        [self.reduce, self.mix]
    }
}

/// Top-down then bottom-up cross-scale fusion.
#[derive(Debug, Clone, Copy)]
pub struct Ccfm {
    lateral5: Conv2d,
    lateral4: Conv2d,
    td4: Fusion,
    td3: Fusion,
    down3: Conv2d,
    bu4: Fusion,
    down4: Conv2d,
    bu5: Fusion,
}

impl Ccfm {
    fn new<T: Scalar>(b: &mut Builder<T>, d: usize) -> Self {
        let mut s = b.sub("ccfm");
        Self {
            lateral5: Conv2d::new(&mut s, "lateral5", d, d, 1, 1, 0),
            lateral4: Conv2d::new(&mut s, "lateral4", d, d, 1, 1, 0),
            td4: Fusion::new(&mut s, "td4", d),
            td3: Fusion::new(&mut s, "td3", d),
            down3: Conv2d::new(&mut s, "down3", d, d, 3, 2, 1),
            bu4: Fusion::new(&mut s, "bu4", d),
            down4: Conv2d::new(&mut s, "down4", d, d, 3, 2, 1),
            bu5: Fusion::new(&mut s, "bu5", d),
        }
    }

    /// The four fusion blocks' convolutions, the last op before each output.
    pub fn fusion_convs(&self) -> Vec<Conv2d> {
        [self.td4, self.td3, self.bu4, self.bu5]
            .iter()
            .flat_map(Fusion::conv_params)
            .collect()
    }

    /// Returns the fused `[N3, N4, N5]` maps.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, p3: Var, p4: Var, f5: Var) -> Result<[Var; 3]> {
        let l5 = self.lateral5.forward(s, f5)?;
        let up5 = s.g.upsample2x(l5)?;
        let t4 = self.td4.forward(s, up5, p4)?;
        let l4 = self.lateral4.forward(s, t4)?;
        let up4 = s.g.upsample2x(l4)?;
        let n3 = self.td3.forward(s, up4, p3)?;
        let d3 = self.down3.forward(s, n3)?;
        let n4 = self.bu4.forward(s, d3, l4)?;
        let d4 = self.down4.forward(s, n4)?;
        let n5 = self.bu5.forward(s, d4, l5)?;
        Ok([n3, n4, n5])
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub aifi: Aifi,
    pub ccfm: Ccfm,
    /// Per-position box deltas; the last layer starts at zero.
    pub box_head: Mlp,
    /// Maps `d_text` label embeddings to the visual width. Shared by
    /// relevance scoring and decoder classification.
    pub label_proj: Linear,
    pub d_model: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            aifi: Aifi::new(b, cfg),
            ccfm: Ccfm::new(b, d),
            box_head: Mlp::new(b, "box_head", &[d, d, d, 4], true),
            label_proj: Linear::new(b, "label_proj", cfg.d_text, d),
            d_model: d,
        }
    }

    /// AIFI on P5, CCFM fusion, and flattening into `O`.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, pyr: &PyramidVars) -> Result<EncodedFeatures<T>> {
        let f5 = self.aifi.forward(s, pyr.p5, true)?;
        let maps = self.ccfm.forward(s, pyr.p3, pyr.p4, f5)?;
        let mut levels = Vec::with_capacity(3);
        let mut rows = Vec::with_capacity(3);
        let mut start = 0;
        for m in maps {
            let &[h, w, d] = s.g.shape(m) else { unreachable!() };
            levels.push(Level {
                height: h,
                width: w,
                start,
            });
            start += h * w;
            rows.push(s.g.reshape(m, &[h * w, d])?);
        }
        let o = s.g.concat_rows(&rows)?;
        Ok(EncodedFeatures {
            o,
            anchors: anchors(&levels),
            levels,
        })
    }

    /// `b_i = sigmoid(MLP(o_i) + logit(anchor_i))`, `[M, 4]`.
    pub fn candidate_boxes<T: Scalar>(&self, s: &mut Session<T>, enc: &EncodedFeatures<T>) -> Result<Var> {
        let delta = self.box_head.forward(s, enc.o)?;
        let base = s.constant(enc.anchors.clone());
        Ok(s.g.refine_sigmoid(delta, base)?)
    }

    /// Projects label embeddings `[K_lbl, d_text]` to `[K_lbl, d]`.
    pub fn project_labels<T: Scalar>(&self, s: &mut Session<T>, labels: Var) -> Result<Var> {
        self.label_proj.forward(s, labels)
    }
}

/// `α_i = max_j cos(o_i, l_j)` over rows of `o: [M, d]` and projected labels
/// `labels: [K, d]`. Vectors are L2-normalized with an ε guard.
pub fn relevance_scores<T: Scalar>(o: &Tensor<T>, labels: &Tensor<T>) -> Result<Vec<T>> {
    if o.ndim() != 2 || labels.ndim() != 2 || o.cols() != labels.cols() {
        return Err(efh_numcore::Error::shape("relevance_scores", o.shape(), labels.shape()).into());
    }
    let unit = |r: &[T]| -> Vec<f64> {
        let n = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(COSINE_EPS);
        r.iter().map(|v| v.as_f64() / n).collect()
    };
    let lab: Vec<Vec<f64>> = (0..labels.rows()).map(|j| unit(labels.row(j))).collect();
    Ok((0..o.rows())
        .map(|i| {
            let oi = unit(o.row(i));
            let best = lab
                .iter()
                .map(|l| l.iter().zip(&oi).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            T::c(best.clamp(-1.0, 1.0))
        })
        .collect())
}

/// Indices of the `k` most relevant positions, best first.
pub fn select_indices<T: Scalar>(relevance: &[T], k: usize) -> Result<Vec<usize>> {
    if k > relevance.len() {
        return Err(Error::arg(format!(
            "cannot select {k} queries from {} positions",
            relevance.len()
        )));
    }
    Ok(top_k(relevance, k)?)
}

/// Gathers the selected candidate boxes. Gradients reach the chosen rows;
/// the choice itself is not differentiated.
pub fn select_queries<T: Scalar>(
    s: &mut Session<T>,
    candidates: Var,
    relevance: &[T],
    k: usize,
) -> Result<(Vec<usize>, QueryProposals)> {
    let idx = select_indices(relevance, k)?;
    let boxes = s.g.gather_rows(candidates, &idx)?;
    Ok((idx, QueryProposals { boxes }))
}
