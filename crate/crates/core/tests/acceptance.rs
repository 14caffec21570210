//! Acceptance suite. Runs the eight criteria in order, prints one
//! `PASS`/`FAIL` line for each, and exits non-zero if any fails.
//!
//! Every tolerance and budget is a named constant below.

mod common;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{all_inputs, fd_check, perturb, project, sample_params, Coord};
use efh::bench::{run_bench, BenchInput, ModuleTimings, COMPONENTS};
use efh::decoder::{build_dn_mask, QueryState};
use efh::encoder::{anchors, relevance_scores, select_indices};
use efh::model::Detector;
use efh::textenc::{LanguageCache, Role};
use efh::training::boxes::{giou, giou_var};
use efh::training::loss::{compute_loss_with, detection_loss, plan_loss, total_loss};
use efh::training::matching::hungarian;
use efh::training::synth::{generate_synthetic_scene, label_names};
use efh::training::trainer::{evaluate, example_forward, synthetic_examples, Trainer};
use efh::{ModelConfig, Session};
use efh_numcore::{
    bilinear_sample, matmul, multi_head_attention, seeded_rng, softmax, top_k, AttentionMask, DeformLayout, Level,
    MhaVars, Tensor, Var,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

// Criterion 1
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
// Criterion 2 (central differences with step common::FD_STEP = 1e-6)
const GRAD_TOL: f64 = 1e-4;
/// Relative errors are `|a - n| / max(|n|, GRAD_FLOOR)`.
const GRAD_FLOOR: f64 = 1e-3;
const E2E_PARAMS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
// Criterion 4
const CACHE_TRIPLES: usize = 50;
// Criterion 5
const CACHE_ITERS: usize = 100;
const CACHE_WARMUP: usize = 10;
const CACHE_RATIO: f64 = 0.05;
const CACHE_BUDGET: Duration = Duration::from_secs(120);
// Criterion 6
const TOY_TRAIN_SCENES: u64 = 100;
const TOY_HELD_OUT_SCENES: u64 = 50;
const TOY_STEPS: usize = 5000;
const TOY_CANVAS: usize = 64;
const TOY_TRAIN_AP: f64 = 0.90;
const TOY_HELD_OUT_AP: f64 = 0.60;
const TOY_BUDGET: Duration = Duration::from_secs(3600);
// Criterion 8
const TIMING_SUM_TOL: f64 = 0.05;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1 -----

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.at(&[i, t]) * b.at(&[t, j]);
            }
        }
    }
    out
}

fn tent_bilinear(f: &Tensor<f64>, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; c];
    for j in 0..h {
        for i in 0..w {
            let wt = (1.0 - (x - i as f64).abs()).max(0.0) * (1.0 - (y - j as f64).abs()).max(0.0);
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wt * f.at(&[j, i, ch]);
            }
        }
    }
    out
}

fn permutations_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, used: &mut [bool], cost: &[f64]) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(r + 1, rows, cols, used, cost));
                used[c] = false;
            }
        }
        best
    }
    go(0, rows, cols, &mut vec![false; cols], cost)
}

fn interval_giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let (ax, ay, bx, by) = (span(a[0], a[2]), span(a[1], a[3]), span(b[0], b[2]), span(b[1], b[3]));
    let ov = |p: (f64, f64), q: (f64, f64)| (p.1.min(q.1) - p.0.max(q.0)).max(0.0);
    let inter = ov(ax, bx) * ov(ay, by);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax.1.max(bx.1) - ax.0.min(bx.0)) * (ay.1.max(by.1) - ay.0.min(by.0));
    inter / union - (hull - union) / hull
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(1);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (m, k, n) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8));
        let a = Tensor::<f64>::uniform(&[m, k], -2.0, 2.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[k, n], -2.0, 2.0, &mut rng);
        let got = matmul(&a, &b).map_err(e)?;
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= ORACLE_TOL, || format!("matmul off by {worst:e}"))?;

    worst = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let x = Tensor::<f64>::uniform(&[r, c], -5.0, 5.0, &mut rng);
        let got = softmax(&x, 1).map_err(e)?;
        for i in 0..r {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..c {
                worst = worst.max((got.at(&[i, j]) - x.at(&[i, j]).exp() / z).abs());
            }
        }
    }
    ensure(worst <= ORACLE_TOL, || format!("softmax off by {worst:e}"))?;

    for _ in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        let k = rng.random_range(0..=n);
        let mut want: Vec<usize> = (0..n).collect();
        want.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        want.truncate(k);
        let got = top_k(&v, k).map_err(e)?;
        ensure(got == want, || format!("top_k({v:?}, {k}) = {got:?}, expected {want:?}"))?;
    }

    worst = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        let f = Tensor::<f64>::uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let (x, y) = (rng.random_range(-1.5..w as f64 + 0.5), rng.random_range(-1.5..h as f64 + 0.5));
        let got = bilinear_sample(&f, &Tensor::from_f64(&[1, 2], &[x, y]).map_err(e)?).map_err(e)?;
        for (ch, want) in tent_bilinear(&f, x, y).into_iter().enumerate() {
            worst = worst.max((got.at(&[0, ch]) - want).abs());
        }
    }
    ensure(worst <= ORACLE_TOL, || format!("bilinear_sample off by {worst:e}"))?;

    for _ in 0..ORACLE_INSTANCES {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(rows..=6);
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..20) as f64).collect();
        let a = hungarian(&cost, rows, cols).map_err(e)?;
        let mut distinct = a.clone();
        distinct.sort_unstable();
        distinct.dedup();
        ensure(distinct.len() == rows, || format!("assignment {a:?} reuses a column"))?;
        let got: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
        let want = permutations_min_cost(&cost, rows, cols);
        ensure(got == want, || format!("hungarian cost {got}, optimum {want}"))?;
    }

    worst = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let mut b = || {
            [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.01..0.6), rng.random_range(0.01..0.6)]
        };
        let (p, q) = (b(), b());
        worst = worst.max((giou(&p, &q).map_err(e)? - interval_giou(p, q)).abs());
    }
    ensure(worst <= ORACLE_TOL, || format!("giou off by {worst:e}"))?;

    let took = start.elapsed();
    ensure(took <= ORACLE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("6 kernels x {ORACLE_INSTANCES} instances in {:.1}s", took.as_secs_f64()))
}

// ---------------------------------------------------------------- 2 -----

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut seeded_rng(seed))
}

fn pos_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.2, 1.5, &mut seeded_rng(seed))
}

fn boxes_t(n: usize, seed: u64) -> Tensor<f64> {
    let mut t = Tensor::uniform(&[n, 4], 0.3, 0.7, &mut seeded_rng(seed));
    for r in 0..n {
        t.row_mut(r)[2] *= 0.5;
        t.row_mut(r)[3] *= 0.5;
    }
    t
}

type KernelFn = Box<dyn Fn(&mut Session<f64>, &[Var]) -> efh::Result<Var>>;

fn kernel_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, KernelFn)> {
    let a = || rand_t(&[3, 4], 10);
    let b = || rand_t(&[3, 4], 11);
    let layout = Arc::new(DeformLayout {
        levels: vec![Level { height: 4, width: 4, start: 0 }, Level { height: 2, width: 2, start: 16 }],
        heads: 2,
        points: 2,
    });
    let mask = AttentionMask::from_fn(4, 4, |r, c| r == c || (r + c) % 3 != 0).unwrap();
    let softmax_mask: Vec<bool> = (0..12).map(|i| i % 4 != 1 || i == 5).collect();
    macro_rules! k {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            ($name, $inputs, Box::new(move |s: &mut Session<f64>, $v: &[Var]| -> efh::Result<Var> {
                let $g = &mut s.g;
                Ok($body?)
            }) as KernelFn)
        };
    }
    vec![
        k!("add", vec![a(), b()], |g, v| g.add(v[0], v[1])),
        k!("sub", vec![a(), b()], |g, v| g.sub(v[0], v[1])),
        k!("mul", vec![a(), b()], |g, v| g.mul(v[0], v[1])),
        k!("div", vec![a(), pos_t(&[3, 4], 12)], |g, v| g.div(v[0], v[1])),
        k!("maximum", vec![a(), b()], |g, v| g.maximum(v[0], v[1])),
        k!("minimum", vec![a(), b()], |g, v| g.minimum(v[0], v[1])),
        k!("scale", vec![a()], |g, v| g.scale(v[0], -2.5)),
        k!("add_scalar", vec![a()], |g, v| g.add_scalar(v[0], 0.7)),
        k!("add_row", vec![a(), rand_t(&[4], 13)], |g, v| g.add_row(v[0], v[1])),
        k!("relu", vec![a()], |g, v| g.relu(v[0])),
        k!("silu", vec![a()], |g, v| g.silu(v[0])),
        k!("sigmoid", vec![a()], |g, v| g.sigmoid(v[0])),
        k!("exp", vec![a()], |g, v| g.exp(v[0])),
        k!("log", vec![pos_t(&[3, 4], 14)], |g, v| g.log(v[0])),
        k!("abs", vec![a()], |g, v| g.abs(v[0])),
        k!("sum", vec![a()], |g, v| g.sum(v[0])),
        k!("mean", vec![a()], |g, v| g.mean(v[0])),
        k!("bce_with_logits", vec![a()], |g, v| g
            .bce_with_logits(v[0], Tensor::uniform(&[3, 4], 0.0, 1.0, &mut seeded_rng(15)))),
        k!("matmul", vec![a(), rand_t(&[4, 5], 16)], |g, v| g.matmul(v[0], v[1])),
        k!("transpose", vec![a()], |g, v| g.transpose(v[0])),
        k!("reshape", vec![a()], |g, v| g.reshape(v[0], &[2, 6])),
        k!("gather_rows", vec![a()], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        k!("concat_rows", vec![a(), rand_t(&[2, 4], 17)], |g, v| g.concat_rows(&[v[0], v[1]])),
        k!("concat_last", vec![a(), rand_t(&[3, 2], 18)], |g, v| g.concat_last(&[v[1], v[0]])),
        k!("slice_rows", vec![a()], |g, v| g.slice_rows(v[0], 1, 3)),
        k!("slice_last", vec![a()], |g, v| g.slice_last(v[0], 1, 3)),
        k!("im2col", vec![rand_t(&[5, 4, 2], 19)], |g, v| g.im2col(v[0], 3, 2, 1)),
        k!("upsample2x", vec![rand_t(&[2, 3, 2], 20)], |g, v| g.upsample2x(v[0])),
        k!("softmax", vec![a()], |g, v| g.softmax(v[0], 1)),
        k!("softmax_axis0", vec![a()], |g, v| g.softmax(v[0], 0)),
        k!("masked_softmax", vec![a()], |g, v| g.masked_softmax(v[0], &softmax_mask)),
        k!("layer_norm", vec![a(), rand_t(&[4], 21), rand_t(&[4], 22)], |g, v| g
            .layer_norm(v[0], v[1], v[2], 1e-5)),
        k!(
            "bilinear_sample",
            vec![rand_t(&[4, 5, 3], 23), Tensor::from_f64(&[3, 2], &[0.3, 0.7, 2.2, 1.6, 3.9, 2.1]).unwrap()],
            |g, v| g.bilinear_sample(v[0], v[1])
        ),
        k!("box_locations", vec![boxes_t(2, 24), rand_t(&[2, 6], 25)], |g, v| g.box_locations(v[0], v[1])),
        k!("refine_sigmoid", vec![rand_t(&[2, 4], 26), boxes_t(2, 27)], |g, v| g.refine_sigmoid(v[0], v[1])),
        k!(
            "ms_deform_sample",
            vec![
                rand_t(&[20, 6], 28),
                Tensor::uniform(&[3, 16], 0.05, 0.95, &mut seeded_rng(29)),
                Tensor::uniform(&[3, 8], 0.0, 1.0, &mut seeded_rng(30)),
            ],
            |g, v| g.ms_deform_sample(v[0], v[1], v[2], layout.clone())
        ),
        k!(
            "multi_head_attention",
            (0..9).map(|i| rand_t(if i == 0 { &[4, 4] } else if i % 2 == 1 { &[4, 4] } else { &[4] }, 31 + i)).collect(),
            |g, v| {
                let p = MhaVars { wq: v[1], bq: v[2], wk: v[3], bk: v[4], wv: v[5], bv: v[6], wo: v[7], bo: v[8], heads: 2 };
                multi_head_attention(g, v[0], v[0], v[0], &p, Some(&mask)).map(|o| o.out)
            }
        ),
        ("giou", vec![boxes_t(4, 40), boxes_t(4, 41)], Box::new(|s: &mut Session<f64>, v: &[Var]| giou_var(s, v[0], v[1]))),
    ]
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let empty = efh::ParamStore::<f64>::new();
    let cases = kernel_cases();
    let mut worst = ("", 0.0f64);
    for (i, (name, inputs, f)) in cases.iter().enumerate() {
        let err = fd_check(&empty, inputs, &all_inputs(inputs), GRAD_FLOOR, |s, v| {
            let y = f(s, v)?;
            project(s, y, 900 + i as u64)
        });
        if err > worst.1 {
            worst = (name, err);
        }
        ensure(err <= GRAD_TOL, || format!("kernel {name}: relative error {err:e}"))?;
    }

    // One full decoder layer: every input coordinate and 300 parameters.
    let mut m = Detector::<f64>::new(ModelConfig::micro()).map_err(e)?;
    perturb(&mut m.store, 2, 0.2);
    let d = m.cfg.d_model;
    let (n, t) = (3, 2);
    let inputs = vec![rand_t(&[n, d], 3), rand_t(&[t, d], 4), rand_t(&[21, d], 5), boxes_t(n, 6)];
    let levels = vec![
        Level { height: 4, width: 4, start: 0 },
        Level { height: 2, width: 2, start: 16 },
        Level { height: 1, width: 1, start: 20 },
    ];
    let mask = build_dn_mask(n, 0, 0, t).map_err(e)?;
    let mut coords = all_inputs(&inputs);
    coords.extend(sample_params(&m.store, 300, 7, |n| n.starts_with("decoder.layer0.") || n.starts_with("decoder.query_pos.")));
    let layer_err = fd_check(&m.store, &inputs, &coords, GRAD_FLOOR, |s, v| {
        let st = m.decoder.layers[0].forward(s, QueryState { q: v[0], p: v[1], b: v[3] }, &m.decoder.query_pos, v[2], &levels, &mask)?;
        let a = project(s, st.q, 10)?;
        let b = project(s, st.p, 11)?;
        let c = project(s, st.b, 12)?;
        let ab = s.g.add(a, b)?;
        Ok(s.g.add(ab, c)?)
    });
    ensure(layer_err <= GRAD_TOL, || format!("decoder layer: relative error {layer_err:e}"))?;

    // End-to-end training loss at the micro config. Matching and IoU-aware
    // targets are held at their unperturbed values, as in backpropagation.
    let ex = efh::training::trainer::synthetic_example::<f64>(3, 64, 64).map_err(e)?;
    let w = m.cfg.loss;
    let plan = {
        let mut s = Session::training(&m.store);
        let (out, groups) = example_forward(&m, &mut s, &ex, &mut seeded_rng(8)).map_err(e)?;
        plan_loss(&mut s, &out, &ex.gt, groups, &w).map_err(e)?
    };
    let coords: Vec<Coord> = sample_params(&m.store, E2E_PARAMS, 9, |_| true);
    let e2e_err = fd_check(&m.store, &[], &coords, GRAD_FLOOR, |s, _| {
        let (out, groups) = example_forward(&m, s, &ex, &mut seeded_rng(8))?;
        Ok(compute_loss_with(s, &out, &ex.gt, groups, &w, &plan)?.total)
    });
    ensure(e2e_err <= GRAD_TOL, || format!("end-to-end loss: relative error {e2e_err:e}"))?;

    let took = start.elapsed();
    ensure(took <= GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{} kernels (worst {} {:.1e}), decoder layer {layer_err:.1e}, {E2E_PARAMS} loss params {e2e_err:.1e}, {:.1}s",
        cases.len(),
        worst.0,
        worst.1,
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 3 -----

fn criterion_3() -> Outcome {
    // Zero deltas leave anchors and reference boxes unchanged: a fresh model
    // has zero-initialized box heads.
    let model = Detector::<f64>::new(ModelConfig::default()).map_err(e)?;
    let scene = generate_synthetic_scene::<f64>(4, 64).map_err(e)?;
    let labels = label_names();
    let mut s = Session::inference(&model.store);
    let (lv, pv) = model.text_vars(&mut s, &labels, "Find shapes").map_err(e)?;
    let out = model.forward(&mut s, &scene.image, lv, pv, None).map_err(e)?;
    let want_anchors: Tensor<f64> = anchors(&out.encoder.features.levels);
    ensure(s.value(out.encoder.candidates) == &want_anchors, || "candidate boxes differ from anchors".into())?;
    let b0 = s.value(out.encoder.proposals).clone();
    for (l, lo) in out.layers.iter().enumerate() {
        ensure(s.value(lo.boxes) == &b0, || format!("layer {l} moved its reference boxes"))?;
    }

    // Selection is invariant to label order and to positive rescaling.
    let mut rng = seeded_rng(3);
    for _ in 0..200 {
        let (m, k_lbl, d) = (rng.random_range(8..40), rng.random_range(1..6), rng.random_range(2..9));
        let o = Tensor::<f64>::uniform(&[m, d], -1.0, 1.0, &mut rng);
        let lab = Tensor::<f64>::uniform(&[k_lbl, d], -1.0, 1.0, &mut rng);
        let k = rng.random_range(1..=m);
        let base = select_indices(&relevance_scores(&o, &lab).map_err(e)?, k).map_err(e)?;
        let mut perm: Vec<usize> = (0..k_lbl).collect();
        perm.shuffle(&mut rng);
        let permuted = Tensor::from_fn(&[k_lbl, d], |i| lab.at(&[perm[i / d], i % d]));
        let (co, cl) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        let scaled_o = Tensor::from_fn(&[m, d], |i| o.data()[i] * co);
        let scaled_l = Tensor::from_fn(&[k_lbl, d], |i| permuted.data()[i] * cl);
        let again = select_indices(&relevance_scores(&scaled_o, &scaled_l).map_err(e)?, k).map_err(e)?;
        ensure(base == again, || format!("selection changed under permutation {perm:?} and scales {co}, {cl}"))?;
    }

    // The denoising mask against its rule table.
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Dn(usize),
        Query,
        Prompt,
    }
    for groups in 0..=2 {
        for per_group in 1..=3 {
            for (k, t) in [(1, 0), (2, 3), (4, 1)] {
                let mask = build_dn_mask(k, groups, per_group, t).map_err(e)?;
                let n_dn = groups * per_group;
                let kind = |i: usize| {
                    if i < n_dn {
                        Kind::Dn(i / per_group)
                    } else if i < n_dn + k {
                        Kind::Query
                    } else {
                        Kind::Prompt
                    }
                };
                for r in 0..n_dn + k + t {
                    for c in 0..n_dn + k + t {
                        let want = match (kind(r), kind(c)) {
                            (Kind::Dn(a), Kind::Dn(b)) => a == b,
                            (Kind::Dn(_), _) | (_, Kind::Dn(_)) => false,
                            (Kind::Query | Kind::Prompt, Kind::Query | Kind::Prompt) => true,
                        };
                        ensure(mask.allows(r, c) == want, || {
                            format!("mask g={groups} m={per_group} k={k} t={t} at ({r}, {c})")
                        })?;
                    }
                }
            }
        }
    }

    // The total is the sum of its parts, and the detection part is the sum
    // of independently computed per-layer losses.
    let model = Detector::<f64>::new(ModelConfig::micro()).map_err(e)?;
    let ex = efh::training::trainer::synthetic_example::<f64>(5, 64, 64).map_err(e)?;
    let mut s = Session::training(&model.store);
    let (out, groups) = example_forward(&model, &mut s, &ex, &mut seeded_rng(6)).map_err(e)?;
    let w = model.cfg.loss;
    let plan = plan_loss(&mut s, &out, &ex.gt, groups, &w).map_err(e)?;
    let loss = compute_loss_with(&mut s, &out, &ex.gt, groups, &w, &plan).map_err(e)?;
    let total = s.value(loss.total).data()[0];
    let od = s.value(loss.od).data()[0];
    let dn = s.value(loss.dn.ok_or("no denoising loss")?).data()[0];
    ensure(total == total_loss(od, dn), || format!("{total} != {od} + {dn}"))?;
    let mut layer_sum = None;
    for l in 0..out.layers.len() {
        let mut single = out.clone();
        single.layers = vec![out.layers[l]];
        let (v, _, _) = detection_loss(&mut s, &single, &ex.gt, &w, &plan.od[l..=l]).map_err(e)?;
        let v = s.value(v).data()[0];
        layer_sum = Some(layer_sum.map_or(v, |acc: f64| acc + v));
    }
    let layer_sum = layer_sum.unwrap_or(0.0);
    ensure(od == layer_sum, || format!("od {od} != per-layer sum {layer_sum}"))?;
    Ok(format!("anchor identities, 200 selection trials, 27 mask tables, loss sums (od {od:.4}, dn {dn:.4})"))
}

// ---------------------------------------------------------------- 4 -----

/// Replays lookups against a plain LRU list: `(hits, misses, evictions)`.
fn predict_cache(lookups: &[(Role, String)], capacity: usize) -> (u64, u64, u64) {
    let mut order: Vec<(Role, String)> = Vec::new();
    let (mut hits, mut misses, mut evictions) = (0, 0, 0);
    for key in lookups {
        if let Some(i) = order.iter().position(|k| k == key) {
            hits += 1;
            let k = order.remove(i);
            order.push(k);
        } else {
            misses += 1;
            order.push(key.clone());
            if order.len() > capacity {
                order.remove(0);
                evictions += 1;
            }
        }
    }
    (hits, misses, evictions)
}

fn criterion_4() -> Outcome {
    let model = Detector::<f32>::new(ModelConfig::default()).map_err(e)?;
    let pool = ["cat", "dog", "red circle", "blue square", "cup", "green triangle", "person", "horse", "car", "tree"];
    let prompts = ["Detect all objects in the image", "Find the animals", "Where is the cup", "Locate shapes"];
    let capacity = 6;
    let cache = LanguageCache::<f32>::new(capacity).map_err(e)?;
    let mut rng = seeded_rng(4);
    let mut lookups = Vec::new();
    for i in 0..CACHE_TRIPLES {
        let n = rng.random_range(1..=4);
        let labels: Vec<String> = pool.choose_multiple(&mut rng, n).map(|s| s.to_string()).collect::<Vec<String>>();
        let prompt = prompts[rng.random_range(0..prompts.len())];
        let scene = generate_synthetic_scene::<f32>(rng.random_range(0..1000), 64).map_err(e)?;
        let id = format!("triple-{i}");
        let off = model.detect(&scene.image, &id, &labels, prompt, None).map_err(e)?.to_json();
        let on = model.detect(&scene.image, &id, &labels, prompt, Some(&cache)).map_err(e)?.to_json();
        ensure(off == on, || format!("triple {i}: cache changed the output"))?;
        lookups.extend(labels.iter().map(|l| (Role::Label, l.clone())));
        lookups.push((Role::Prompt, prompt.to_string()));
    }
    let (hits, misses, evictions) = predict_cache(&lookups, capacity);
    let st = cache.stats();
    ensure((st.hits, st.misses, st.evictions) == (hits, misses, evictions), || {
        format!("counters {st:?}, predicted hits {hits} misses {misses} evictions {evictions}")
    })?;
    Ok(format!("{CACHE_TRIPLES} triples identical; {hits} hits, {misses} misses, {evictions} evictions as predicted"))
}

// ---------------------------------------------------------------- 5 -----

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let model = Detector::<f32>::new(ModelConfig::default()).map_err(e)?;
    let scene = generate_synthetic_scene::<f32>(0, 64).map_err(e)?;
    let input = BenchInput {
        images: vec![("scene".into(), scene.image)],
        labels: label_names(),
        prompt: "Detect all objects in the image".into(),
    };
    let off = run_bench(&model, &input, false, CACHE_WARMUP, CACHE_ITERS).map_err(e)?;
    let on = run_bench(&model, &input, true, CACHE_WARMUP, CACHE_ITERS).map_err(e)?;
    let ratio = on.text_backbone.mean_ms / off.text_backbone.mean_ms;
    ensure(ratio <= CACHE_RATIO, || {
        format!("cached text {:.4} ms vs {:.4} ms uncached (ratio {ratio:.4})", on.text_backbone.mean_ms, off.text_backbone.mean_ms)
    })?;
    let took = start.elapsed();
    ensure(took <= CACHE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "text backbone {:.4} ms cached vs {:.3} ms uncached (ratio {ratio:.4})",
        on.text_backbone.mean_ms, off.text_backbone.mean_ms
    ))
}

// ---------------------------------------------------------------- 6 -----

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let max_prompt = cfg.max_text_len - 1;
    let train_seeds: Vec<u64> = (0..TOY_TRAIN_SCENES).collect();
    let held_seeds: Vec<u64> = (10_000..10_000 + TOY_HELD_OUT_SCENES).collect();
    let train = synthetic_examples::<f32>(&train_seeds, TOY_CANVAS, max_prompt, 1).map_err(e)?;
    let held = synthetic_examples::<f32>(&held_seeds, TOY_CANVAS, max_prompt, 1).map_err(e)?;
    ensure(train.iter().all(|x| x.sample.labels.len() == 8), || "expected 8 labels".into())?;
    let mut trainer = Trainer::new(Detector::new(cfg).map_err(e)?, TOY_STEPS);
    trainer.run(&train, |_| {}).map_err(e)?;
    let ap_train = evaluate(&trainer.model, &train, 0.5).map_err(e)?.mean;
    let ap_held = evaluate(&trainer.model, &held, 0.5).map_err(e)?.mean;
    let took = start.elapsed();
    let summary = format!(
        "AP@0.5 train {ap_train:.3} (need {TOY_TRAIN_AP}), held-out {ap_held:.3} (need {TOY_HELD_OUT_AP}), {TOY_STEPS} steps in {:.0}s",
        took.as_secs_f64()
    );
    ensure(ap_train >= TOY_TRAIN_AP && ap_held >= TOY_HELD_OUT_AP && took <= TOY_BUDGET, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7 -----

fn efh(args: &[&str], env: &[(&str, &str)]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_efh"))
        .args(args)
        .envs(env.iter().copied())
        .output()
        .map_err(e)?;
    ensure(out.status.success(), || {
        format!("efh {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|err| format!("{}: {err}", p.display()))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).display().to_string();
    let train = |tag: &str, threads: &str| {
        efh(
            &["train", "--steps", "25", "--scenes", "6", "--seed", "11", "--eval", "--out", &s(&format!("{tag}.otck")), "--metrics", &s(&format!("{tag}.jsonl"))],
            &[("EFH_THREADS", threads)],
        )
    };
    train("a", "1")?;
    train("b", "3")?;
    let (ma, mb) = (read(&p("a.jsonl"))?, read(&p("b.jsonl"))?);
    ensure(!ma.is_empty() && ma == mb, || "metrics logs differ".into())?;
    ensure(read(&p("a.otck"))? == read(&p("b.otck"))?, || "checkpoints differ".into())?;
    ensure(String::from_utf8_lossy(&ma).contains("\"ap@0.5\""), || "metrics lack ap@0.5".into())?;

    let scene = generate_synthetic_scene::<f32>(77, 64).map_err(e)?;
    std::fs::write(p("scene.ppm"), scene.image.to_ppm()).map_err(e)?;
    let detect = |out: &str| {
        efh(
            &["detect", "--checkpoint", &s("a.otck"), "--image", &s("scene.ppm"), "--labels", "red circle,blue square", "--prompt", "Find shapes", "--out", &s(out)],
            &[],
        )
    };
    detect("d1")?;
    detect("d2")?;
    let (d1, d2) = (read(&p("d1/scene.json"))?, read(&p("d2/scene.json"))?);
    ensure(d1 == d2, || "detect outputs differ".into())?;
    Ok(format!("train logs ({} bytes) and checkpoints identical across runs and thread counts; detect byte-identical", ma.len()))
}

// ---------------------------------------------------------------- 8 -----

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let images = dir.path().join("images");
    std::fs::create_dir(&images).map_err(e)?;
    for seed in 0..2 {
        let scene = generate_synthetic_scene::<f32>(seed, 64).map_err(e)?;
        std::fs::write(images.join(format!("s{seed}.ppm")), scene.image.to_ppm()).map_err(e)?;
    }
    let report = dir.path().join("report.json");
    let labels = label_names().join(",");
    efh(
        &["bench", "--images", &images.display().to_string(), "--labels", &labels, "--iters", "50", "--warmup", "5", "--cache", "off", "--out", &report.display().to_string()],
        &[],
    )?;
    let text = String::from_utf8(read(&report)?).map_err(e)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(e)?;
    let obj = value.as_object().ok_or("report is not an object")?;
    let timed: Vec<&str> = obj.iter().filter(|(_, v)| v.get("mean_ms").is_some()).map(|(k, _)| k.as_str()).collect();
    let mut want: Vec<&str> = COMPONENTS.to_vec();
    want.push("total");
    let mut got = timed.clone();
    got.sort_unstable();
    want.sort_unstable();
    ensure(got == want, || format!("timed keys {timed:?}"))?;
    let t = ModuleTimings::from_json(&text).map_err(e)?;
    let sum: f64 = t.components().iter().map(|(_, s)| s.mean_ms).sum();
    let rel = (sum - t.total.mean_ms).abs() / t.total.mean_ms;
    ensure(rel <= TIMING_SUM_TOL, || format!("components sum {sum:.3} ms vs total {:.3} ms", t.total.mean_ms))?;
    Ok(format!("keys {:?}; components {sum:.2} ms vs total {:.2} ms ({:.2}%)", COMPONENTS, t.total.mean_ms, rel * 100.0))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("kernel oracles", criterion_1),
        ("gradient checks", criterion_2),
        ("structural invariants", criterion_3),
        ("language-cache equivalence", criterion_4),
        ("cache latency", criterion_5),
        ("toy overfit", criterion_6),
        ("determinism", criterion_7),
        ("timing report contract", criterion_8),
    ];
    let only: Option<usize> = std::env::var("EFH_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
