//! Detection and denoising losses with per-layer auxiliary terms.
//!
//! Every term is summed and divided by `max(G, 1)`. The detection loss is the
//! sum over decoder layers of independently matched per-layer losses; the
//! denoising loss uses the known query/ground-truth correspondence, is
//! averaged over groups and summed over layers.

use efh_numcore::{Scalar, Tensor, Var};

use crate::config::LossWeights;
use crate::error::Result;
use crate::model::ForwardOutput;
use crate::params::Session;
use crate::training::boxes::{giou_var, iou, row_box};
use crate::training::matching::hungarian_match;
use crate::training::GroundTruth;

/// Soft classification targets: a matched query gets IoU(pred, gt) at its gt
/// label's column, everything else is 0.
pub fn iou_aware_cls_targets<T: Scalar>(
    pairs: &[(usize, usize)],
    pred_boxes: &Tensor<T>,
    gt: &GroundTruth,
    num_labels: usize,
) -> Tensor<T> {
    let mut t = Tensor::zeros(&[pred_boxes.rows(), num_labels]);
    for &(q, g) in pairs {
        let v = iou(&row_box(pred_boxes, q), &gt.boxes[g]).clamp(0.0, 1.0);
        t.row_mut(q)[gt.labels[g]] = T::c(v);
    }
    t
}

/// Unweighted loss terms of one set of predictions.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

/// The non-differentiable choices behind one set of loss terms: the
/// `(query, gt)` pairs and the soft classification targets they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct TermPlan<T> {
    pub pairs: Vec<(usize, usize)>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> TermPlan<T> {
    pub fn new(pairs: Vec<(usize, usize)>, boxes: &Tensor<T>, gt: &GroundTruth, num_labels: usize) -> Self {
        let targets = iou_aware_cls_targets(&pairs, boxes, gt, num_labels);
        Self { pairs, targets }
    }
}

/// Per-layer plans of a whole forward pass. Targets are constants in the
/// graph, so reusing a plan while perturbing parameters gives the function
/// whose gradient backpropagation computes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan<T> {
    pub od: Vec<TermPlan<T>>,
    pub dn: Vec<TermPlan<T>>,
}

/// BCE against the plan's targets over all rows, plus L1 and `1 − GIoU`
/// over its pairs, each divided by `norm`.
pub fn loss_terms<T: Scalar>(
    s: &mut Session<T>,
    boxes: Var,
    logits: Var,
    plan: &TermPlan<T>,
    gt: &GroundTruth,
    norm: f64,
) -> Result<TermVars> {
    let pairs = &plan.pairs;
    let bce = s.g.bce_with_logits(logits, plan.targets.clone())?;
    let cls = s.g.sum(bce)?;
    let cls = s.g.scale(cls, 1.0 / norm)?;
    if pairs.is_empty() {
        let zero = s.constant(Tensor::scalar(T::zero()));
        return Ok(TermVars {
            cls,
            l1: zero,
            giou: zero,
        });
    }
    let qs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let gt_rows: Vec<f64> = pairs.iter().flat_map(|p| gt.boxes[p.1]).collect();
    let pred = s.g.gather_rows(boxes, &qs)?;
    let target = s.constant(Tensor::from_f64(&[pairs.len(), 4], &gt_rows)?);
    let diff = s.g.sub(pred, target)?;
    let diff = s.g.abs(diff)?;
    let l1 = s.g.sum(diff)?;
    let l1 = s.g.scale(l1, 1.0 / norm)?;
    let gi = giou_var(s, pred, target)?;
    let gi = s.g.sum(gi)?;
    // Σ(1 − GIoU) = n − ΣGIoU
    let gi = s.g.scale(gi, -1.0)?;
    let gi = s.g.add_scalar(gi, pairs.len() as f64)?;
    let giou = s.g.scale(gi, 1.0 / norm)?;
    Ok(TermVars { cls, l1, giou })
}

/// Weighted loss values, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_cls: f64,
    pub dn_l1: f64,
    pub dn_giou: f64,
}

impl LossBreakdown {
    pub fn od(&self) -> f64 {
        self.cls + self.l1 + self.giou
    }

    pub fn dn(&self) -> f64 {
        self.dn_cls + self.dn_l1 + self.dn_giou
    }

    pub fn total(&self) -> f64 {
        total_loss(self.od(), self.dn())
    }

    pub fn add(&mut self, o: &Self) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.dn_cls += o.dn_cls;
        self.dn_l1 += o.dn_l1;
        self.dn_giou += o.dn_giou;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cls: self.cls * c,
            l1: self.l1 * c,
            giou: self.giou * c,
            dn_cls: self.dn_cls * c,
            dn_l1: self.dn_l1 * c,
            dn_giou: self.dn_giou * c,
        }
    }
}

/// `Loss = Loss_od + Loss_dn`.
pub fn total_loss(od: f64, dn: f64) -> f64 {
    od + dn
}

/// A loss in the graph together with its logged value breakdown.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub od: Var,
    pub dn: Option<Var>,
    pub breakdown: LossBreakdown,
    /// Weighted detection loss of each decoder layer.
    pub od_per_layer: Vec<f64>,
}

fn weighted<T: Scalar>(s: &mut Session<T>, t: &TermVars, w: [f64; 3]) -> Result<(Var, [f64; 3])> {
    let c = s.g.scale(t.cls, w[0])?;
    let l = s.g.scale(t.l1, w[1])?;
    let g = s.g.scale(t.giou, w[2])?;
    let vals = [c, l, g].map(|v| s.value(v).data()[0].as_f64());
    let cl = s.g.add(c, l)?;
    Ok((s.g.add(cl, g)?, vals))
}

/// Layer `l`'s matching-query boxes and logits.
fn matching_rows<T: Scalar>(s: &mut Session<T>, out: &ForwardOutput<T>, l: usize) -> Result<(Var, Var)> {
    let lo = out.layers[l];
    if out.n_dn == 0 {
        return Ok((lo.boxes, lo.logits));
    }
    let (a, b) = (out.n_dn, out.n_dn + out.k);
    Ok((s.g.slice_rows(lo.boxes, a, b)?, s.g.slice_rows(lo.logits, a, b)?))
}

/// Matches every layer independently and fixes all soft targets.
pub fn plan_loss<T: Scalar>(
    s: &mut Session<T>,
    out: &ForwardOutput<T>,
    gt: &GroundTruth,
    groups: usize,
    w: &LossWeights,
) -> Result<LossPlan<T>> {
    let mut od = Vec::with_capacity(out.layers.len());
    for l in 0..out.layers.len() {
        let (boxes, logits) = matching_rows(s, out, l)?;
        let pairs = hungarian_match(s.value(boxes), s.value(logits), gt, w)?;
        od.push(TermPlan::new(pairs, s.value(boxes), gt, s.g.shape(logits)[1]));
    }
    let mut dn = Vec::new();
    if has_dn(out, gt, groups) {
        let per_group = gt.len();
        let pairs: Vec<(usize, usize)> = (0..groups)
            .flat_map(|j| (0..per_group).map(move |i| (j * per_group + i, i)))
            .collect();
        for lo in &out.layers {
            let boxes = s.g.slice_rows(lo.boxes, 0, out.n_dn)?;
            let k = s.g.shape(lo.logits)[1];
            dn.push(TermPlan::new(pairs.clone(), s.value(boxes), gt, k));
        }
    }
    Ok(LossPlan { od, dn })
}

fn has_dn<T>(out: &ForwardOutput<T>, gt: &GroundTruth, groups: usize) -> bool {
    out.n_dn > 0 && groups > 0 && !gt.is_empty()
}

/// `Loss_od`: each layer's own matching, summed over layers.
pub fn detection_loss<T: Scalar>(
    s: &mut Session<T>,
    out: &ForwardOutput<T>,
    gt: &GroundTruth,
    w: &LossWeights,
    plans: &[TermPlan<T>],
) -> Result<(Var, LossBreakdown, Vec<f64>)> {
    let norm = gt.len().max(1) as f64;
    let mut total = None;
    let mut br = LossBreakdown::default();
    let mut per_layer = Vec::with_capacity(out.layers.len());
    for (l, plan) in plans.iter().enumerate().take(out.layers.len()) {
        let (boxes, logits) = matching_rows(s, out, l)?;
        let terms = loss_terms(s, boxes, logits, plan, gt, norm)?;
        let (v, [c, l1, g]) = weighted(s, &terms, [w.cls, w.l1, w.giou])?;
        br.cls += c;
        br.l1 += l1;
        br.giou += g;
        per_layer.push(c + l1 + g);
        total = Some(match total {
            None => v,
            Some(t) => s.g.add(t, v)?,
        });
    }
    let total = total.expect("at least one decoder layer");
    Ok((total, br, per_layer))
}

/// `Loss_dn`: denoising query `j·G + i` reconstructs ground truth `i`;
/// averaged over the `groups`, summed over layers. `None` without dn rows.
pub fn dn_loss<T: Scalar>(
    s: &mut Session<T>,
    out: &ForwardOutput<T>,
    gt: &GroundTruth,
    groups: usize,
    w: &LossWeights,
    plans: &[TermPlan<T>],
) -> Result<Option<(Var, LossBreakdown)>> {
    if !has_dn(out, gt, groups) || plans.is_empty() {
        return Ok(None);
    }
    let norm = (gt.len() * groups) as f64;
    let mut total = None;
    let mut br = LossBreakdown::default();
    for (lo, plan) in out.layers.iter().zip(plans) {
        let boxes = s.g.slice_rows(lo.boxes, 0, out.n_dn)?;
        let logits = s.g.slice_rows(lo.logits, 0, out.n_dn)?;
        let terms = loss_terms(s, boxes, logits, plan, gt, norm)?;
        let (v, [c, l1, g]) = weighted(s, &terms, [w.dn_cls, w.dn_l1, w.dn_giou])?;
        br.dn_cls += c;
        br.dn_l1 += l1;
        br.dn_giou += g;
        total = Some(match total {
            None => v,
            Some(t) => s.g.add(t, v)?,
        });
    }
    Ok(Some((total.expect("at least one decoder layer"), br)))
}

/// `Loss_od + Loss_dn` for one forward pass.
pub fn compute_loss<T: Scalar>(
    s: &mut Session<T>,
    out: &ForwardOutput<T>,
    gt: &GroundTruth,
    groups: usize,
    w: &LossWeights,
) -> Result<LossOutput> {
    let plan = plan_loss(s, out, gt, groups, w)?;
    compute_loss_with(s, out, gt, groups, w, &plan)
}

/// [`compute_loss`] under a fixed matching and fixed targets.
pub fn compute_loss_with<T: Scalar>(
    s: &mut Session<T>,
    out: &ForwardOutput<T>,
    gt: &GroundTruth,
    groups: usize,
    w: &LossWeights,
    plan: &LossPlan<T>,
) -> Result<LossOutput> {
    if plan.od.len() != out.layers.len() {
        return Err(crate::error::Error::arg("loss plan does not cover every decoder layer"));
    }
    let (od, mut breakdown, od_per_layer) = detection_loss(s, out, gt, w, &plan.od)?;
    let dn = dn_loss(s, out, gt, groups, w, &plan.dn)?;
    let (total, dn) = match dn {
        Some((v, b)) => {
            breakdown.add(&b);
            (s.g.add(od, v)?, Some(v))
        }
        None => (od, None),
    };
    Ok(LossOutput {
        total,
        od,
        dn,
        breakdown,
        od_per_layer,
    })
}
