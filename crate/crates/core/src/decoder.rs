//! Language-aware decoder: joint query/prompt self-attention, deformable
//! cross-attention into the encoder output, iterative box refinement and
//! classification against projected label embeddings.

use std::fmt::Write as _;
use std::sync::Arc;

use efh_numcore::{multi_head_attention, AttentionMask, DeformLayout, Level, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, FeedForward, LayerNorm, Linear, Mlp};
use crate::params::{ParamId, Session};

/// Multi-scale deformable attention with box-relative sampling offsets.
#[derive(Debug, Clone, Copy)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

impl DeformableAttention {
    /// Offsets start from a fixed per-head ring of directions (weights zero,
    /// bias set) and attention weights start uniform.
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, d: usize, heads: usize, points: usize, levels: usize) -> Self {
        let mut s = b.sub(name);
        let slots = heads * levels * points;
        let offsets = Linear::zeroed(&mut s, "offsets", d, 2 * slots);
        let bias = s.store.get_mut(offsets.b);
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (c, sn) = (theta.cos(), theta.sin());
            let m = c.abs().max(sn.abs());
            for l in 0..levels {
                for p in 0..points {
                    let r = (p + 1) as f64 / points as f64;
                    let k = ((h * levels + l) * points + p) * 2;
                    bias.data_mut()[k] = T::c(c / m * r);
                    bias.data_mut()[k + 1] = T::c(sn / m * r);
                }
            }
        }
        Self {
            offsets,
            weights: Linear::zeroed(&mut s, "weights", d, slots),
            value: Linear::new(&mut s, "value", d, d),
            out: Linear::new(&mut s, "out", d, d),
            heads,
            points,
            levels,
        }
    }

    /// `q: [N, d]`, `refs: [N, 4]`, `o: [M, d]` laid out as `levels`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, q: Var, refs: Var, o: Var, levels: &[Level]) -> Result<Var> {
        if levels.len() != self.levels {
            return Err(Error::arg(format!("expected {} levels, got {}", self.levels, levels.len())));
        }
        let n = s.g.shape(q)[0];
        let slots = self.levels * self.points;
        let off = self.offsets.forward(s, q)?;
        let locs = s.g.box_locations(refs, off)?;
        let w = self.weights.forward(s, q)?;
        let w = s.g.reshape(w, &[n * self.heads, slots])?;
        let w = s.g.softmax(w, 1)?;
        let w = s.g.reshape(w, &[n, self.heads * slots])?;
        let v = self.value.forward(s, o)?;
        let layout = Arc::new(DeformLayout {
            levels: levels.to_vec(),
            heads: self.heads,
            points: self.points,
        });
        let sampled = s.g.ms_deform_sample(v, locs, w, layout)?;
        self.out.forward(s, sampled)
    }
}

/// One decoder layer's parameters.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    ln_q1: LayerNorm,
    ln_p: LayerNorm,
    pub cross: DeformableAttention,
    ln_q2: LayerNorm,
    ffn: FeedForward,
    ln_q3: LayerNorm,
    /// Box refinement MLP; its last layer starts at zero.
    pub box_head: Mlp,
}

/// Per-layer state `(Q_l, P_l, B_l)`.
#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    pub q: Var,
    pub p: Var,
    pub b: Var,
}

impl DecoderLayer {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut s = b.sub(name);
        Self {
            self_attn: Attention::new(&mut s, "self_attn", d, cfg.heads),
            ln_q1: LayerNorm::new(&mut s, "ln_q1", d),
            ln_p: LayerNorm::new(&mut s, "ln_p", d),
            cross: DeformableAttention::new(&mut s, "cross", d, cfg.heads, cfg.points, 3),
            ln_q2: LayerNorm::new(&mut s, "ln_q2", d),
            ffn: FeedForward::new(&mut s, "ffn", d, cfg.ffn_dim),
            ln_q3: LayerNorm::new(&mut s, "ln_q3", d),
            box_head: Mlp::new(&mut s, "box_head", &[d, d, d, 4], true),
        }
    }

    /// Self-attention over `[Q+pos; P]`, deformable attention of the queries
    /// into `O`, feed-forward on the queries, then box refinement.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        state: QueryState,
        query_pos: &Mlp,
        o: Var,
        levels: &[Level],
        mask: &AttentionMask,
    ) -> Result<QueryState> {
        let QueryState { q, p, b } = state;
        let (n, t) = (s.g.shape(q)[0], s.g.shape(p)[0]);
        if mask.rows() != n + t || mask.cols() != n + t {
            return Err(Error::arg(format!(
                "decoder mask is {}x{}, expected {}x{}",
                mask.rows(),
                mask.cols(),
                n + t,
                n + t
            )));
        }
        let pos = query_pos.forward(s, b)?;
        let qp = s.g.add(q, pos)?;
        let x = s.g.concat_rows(&[qp, p])?;
        let v = s.g.concat_rows(&[q, p])?;
        let mha = self.self_attn.bind(s);
        let a = multi_head_attention(&mut s.g, x, x, v, &mha, Some(mask))?.out;
        let aq = s.g.slice_rows(a, 0, n)?;
        let ap = s.g.slice_rows(a, n, n + t)?;
        let q = s.g.add(q, aq)?;
        let q = self.ln_q1.forward(s, q)?;
        let p = s.g.add(p, ap)?;
        let p = self.ln_p.forward(s, p)?;

        let qp = s.g.add(q, pos)?;
        let c = self.cross.forward(s, qp, b, o, levels)?;
        let q = s.g.add(q, c)?;
        let q = self.ln_q2.forward(s, q)?;

        let f = self.ffn.forward(s, q)?;
        let q = s.g.add(q, f)?;
        let q = self.ln_q3.forward(s, q)?;

        let delta = self.box_head.forward(s, q)?;
        let b = s.g.refine_sigmoid(delta, b)?;
        Ok(QueryState { q, p, b })
    }
}

/// `logits[i][j] = <q_i, l_j> / √d` against projected labels `[K_lbl, d]`.
pub fn classify<T: Scalar>(s: &mut Session<T>, q: Var, labels: Var) -> Result<Var> {
    let d = s.g.shape(q)[1];
    let lt = s.g.transpose(labels)?;
    let logits = s.g.matmul(q, lt)?;
    Ok(s.g.scale(logits, 1.0 / (d as f64).sqrt())?)
}

/// Boxes and logits after one decoder layer, kept for auxiliary losses.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub boxes: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub query_table: ParamId,
    pub prompt_proj: Linear,
    /// Shared embedding of reference boxes added to queries.
    pub query_pos: Mlp,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            query_table: b.uniform("queries", &[cfg.num_queries, d], 1.0 / (d as f64).sqrt()),
            prompt_proj: Linear::new(b, "prompt_proj", cfg.d_text, d),
            query_pos: Mlp::new(b, "query_pos", &[4, 2 * d, d], false),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(b, &format!("layer{i}"), cfg))
                .collect(),
        }
    }

    /// First `k` rows of the learned content-query table.
    pub fn initial_queries<T: Scalar>(&self, s: &mut Session<T>, k: usize) -> Result<Var> {
        let table = s.p(self.query_table);
        if k == s.g.shape(table)[0] {
            Ok(table)
        } else {
            Ok(s.g.slice_rows(table, 0, k)?)
        }
    }

    /// Runs every layer from `init`, classifying after each one.
    pub fn run<T: Scalar>(
        &self,
        s: &mut Session<T>,
        init: QueryState,
        o: Var,
        levels: &[Level],
        labels: Var,
        mask: &AttentionMask,
    ) -> Result<Vec<LayerOutput>> {
        let mut state = init;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            state = layer.forward(s, state, &self.query_pos, o, levels, mask)?;
            let logits = classify(s, state.q, labels)?;
            outs.push(LayerOutput {
                boxes: state.b,
                logits,
            });
        }
        Ok(outs)
    }
}

/// Attention mask over `[dn (groups·per_group) | matching (k) | prompt (t)]`.
///
/// Denoising rows see only their own group. Matching and prompt rows see
/// each other but no denoising row.
pub fn build_dn_mask(k: usize, groups: usize, per_group: usize, t: usize) -> Result<AttentionMask> {
    let n_dn = groups * per_group;
    let n = n_dn + k + t;
    AttentionMask::from_fn(n, n, |r, c| match (r < n_dn, c < n_dn) {
        (true, true) => r / per_group == c / per_group,
        (true, false) | (false, true) => false,
        (false, false) => true,
    })
    .map_err(Error::from)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image: String,
    pub prompt: String,
    pub labels: Vec<String>,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    /// Arg-max label per query with its sigmoid score; queries scoring at
    /// least `threshold` are kept, best first.
    pub fn from_outputs<T: Scalar>(
        boxes: &Tensor<T>,
        logits: &Tensor<T>,
        threshold: f64,
        image: &str,
        prompt: &str,
        labels: &[String],
    ) -> Self {
        let mut detections: Vec<Detection> = (0..logits.rows())
            .filter_map(|i| {
                let row = logits.row(i);
                let (label, best) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, v)| {
                        if v.as_f64() > acc.1 {
                            (j, v.as_f64())
                        } else {
                            acc
                        }
                    });
                let score = 1.0 / (1.0 + (-best).exp());
                (score >= threshold).then(|| {
                    let b = boxes.row(i);
                    Detection {
                        bbox: [b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()],
                        score,
                        label,
                    }
                })
            })
            .collect();
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self {
            image: image.to_string(),
            prompt: prompt.to_string(),
            labels: labels.to_vec(),
            detections,
        }
    }

    /// One JSON document with six-decimal fixed formatting.
    pub fn to_json(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).expect("string serializes");
        let mut out = format!("{{\"image\":{},\"prompt\":{},\"detections\":[", q(&self.image), q(&self.prompt));
        for (i, d) in self.detections.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let [cx, cy, w, h] = d.bbox;
            write!(
                out,
                "{{\"bbox\":[{cx:.6},{cy:.6},{w:.6},{h:.6}],\"score\":{:.6},\"label\":{}}}",
                d.score,
                q(&self.labels[d.label])
            )
            .expect("write to string");
        }
        out.push_str("]}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dn_mask_without_groups_is_full() {
        let m = build_dn_mask(3, 0, 2, 2).unwrap();
        assert!(m.as_slice().iter().all(|&a| a));
    }

    #[test]
    fn dn_mask_groups_are_block_diagonal() {
        let m = build_dn_mask(2, 2, 3, 1).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.allows(r, c), r / 3 == c / 3);
            }
            assert!(!m.allows(r, 8));
        }
    }

    #[test]
    fn detections_threshold_and_order() {
        let boxes = Tensor::<f64>::from_f64(&[2, 4], &[0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1]).unwrap();
        let logits = Tensor::from_f64(&[2, 2], &[0.0, -1.0, -3.0, 2.0]).unwrap();
        let labels = vec!["a".to_string(), "b".to_string()];
        let set = DetectionSet::from_outputs(&boxes, &logits, 0.05, "img", "p", &labels);
        assert_eq!(set.detections.len(), 2);
        assert_eq!(set.detections[0].label, 1);
        assert_eq!(set.detections[1].score, 0.5);
        let none = DetectionSet::from_outputs(&boxes, &logits, 1.0, "img", "p", &labels);
        assert!(none.detections.is_empty());
        let json = set.to_json();
        assert!(json.starts_with(r#"{"image":"img","prompt":"p","detections":[{"bbox":[0.300000,0.300000,0.100000,0.100000],"score":0.880797,"label":"b"}"#));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["detections"][1]["label"], "a");
    }
}
