mod common;

use common::{all_inputs, fd_check, perturb, project, sample_params};
use efh::backbone::Image;
use efh::decoder::{build_dn_mask, QueryState};
use efh::model::Detector;
use efh::training::boxes::giou_var;
use efh::training::loss::{compute_loss_with, plan_loss};
use efh::training::trainer::{example_forward, example_loss, synthetic_example};
use efh::{ModelConfig, Session};
use efh_numcore::{seeded_rng, Level, Tensor};

/// Relative errors are taken against `max(|numeric|, FLOOR)`.
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn micro_model(seed: u64) -> Detector<f64> {
    let mut m = Detector::<f64>::new(ModelConfig::micro()).unwrap();
    perturb(&mut m.store, seed, 0.2);
    m
}

fn levels() -> Vec<Level> {
    vec![
        Level { height: 4, width: 4, start: 0 },
        Level { height: 2, width: 2, start: 16 },
        Level { height: 1, width: 1, start: 20 },
    ]
}

fn boxes(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let mut t = Tensor::uniform(&[n, 4], 0.3, 0.7, &mut rng);
    for r in 0..n {
        t.row_mut(r)[2] *= 0.5;
        t.row_mut(r)[3] *= 0.5;
    }
    t
}

#[test]
fn decoder_layer_gradient() {
    let m = micro_model(1);
    let d = m.cfg.d_model;
    let (n, t) = (3, 2);
    let inputs = vec![
        Tensor::uniform(&[n, d], -1.0, 1.0, &mut seeded_rng(2)),
        Tensor::uniform(&[t, d], -1.0, 1.0, &mut seeded_rng(3)),
        Tensor::uniform(&[21, d], -1.0, 1.0, &mut seeded_rng(4)),
        boxes(n, 5),
    ];
    let mask = build_dn_mask(n, 0, 0, t).unwrap();
    let layer = &m.decoder.layers[0];
    let f = |s: &mut efh::Session<f64>, v: &[efh_numcore::Var]| {
        let st = layer.forward(s, QueryState { q: v[0], p: v[1], b: v[3] }, &m.decoder.query_pos, v[2], &levels(), &mask)?;
        let a = project(s, st.q, 10)?;
        let b = project(s, st.p, 11)?;
        let c = project(s, st.b, 12)?;
        let ab = s.g.add(a, b)?;
        Ok(s.g.add(ab, c)?)
    };
    let mut coords = all_inputs(&inputs);
    coords.extend(sample_params(&m.store, 200, 6, |n| n.starts_with("decoder.layer0.") || n.starts_with("decoder.query_pos.")));
    let err = fd_check(&m.store, &inputs, &coords, FLOOR, f);
    assert!(err <= TOL, "decoder layer relative error {err:e}");
}

#[test]
fn backbone_and_encoder_gradient() {
    let m = micro_model(7);
    let image = Image::new(Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut seeded_rng(8))).unwrap();
    let f = |s: &mut efh::Session<f64>, _: &[efh_numcore::Var]| {
        let pyr = m.backbone.forward(s, &image)?;
        let enc = m.encoder.encode(s, &pyr)?;
        let c = m.encoder.candidate_boxes(s, &enc)?;
        let a = project(s, enc.o, 20)?;
        let b = project(s, c, 21)?;
        Ok(s.g.add(a, b)?)
    };
    let coords = sample_params(&m.store, 200, 9, |n| n.starts_with("backbone.") || n.starts_with("encoder."));
    let err = fd_check(&m.store, &[], &coords, FLOOR, f);
    assert!(err <= TOL, "backbone/encoder relative error {err:e}");
}

#[test]
fn text_encoder_gradient() {
    let m = micro_model(12);
    let labels = vec!["red circle".to_string(), "cup".to_string()];
    let f = |s: &mut efh::Session<f64>, _: &[efh_numcore::Var]| {
        let (l, p) = m.text_vars(s, &labels, "Find a cup")?;
        let a = project(s, l, 30)?;
        let b = project(s, p, 31)?;
        Ok(s.g.add(a, b)?)
    };
    let coords = sample_params(&m.store, 150, 13, |n| n.starts_with("text."));
    let err = fd_check(&m.store, &[], &coords, FLOOR, f);
    assert!(err <= TOL, "text encoder relative error {err:e}");
}

#[test]
fn giou_graph_gradient() {
    let inputs = vec![boxes(5, 40), boxes(5, 41)];
    let store = efh::ParamStore::<f64>::new();
    let err = fd_check(&store, &inputs, &all_inputs(&inputs), FLOOR, |s, v| {
        let g = giou_var(s, v[0], v[1])?;
        project(s, g, 42)
    });
    assert!(err <= TOL, "giou relative error {err:e}");
}

#[test]
fn end_to_end_loss_gradient() {
    let m = micro_model(50);
    let ex = synthetic_example::<f64>(3, 64, 64).unwrap();
    let coords = sample_params(&m.store, 20, 51, |_| true);
    let w = m.cfg.loss;
    // Matching and IoU-aware targets are held at their unperturbed values:
    // backpropagation treats them as constants.
    let plan = {
        let mut s = Session::training(&m.store);
        let (out, groups) = example_forward(&m, &mut s, &ex, &mut seeded_rng(52)).unwrap();
        plan_loss(&mut s, &out, &ex.gt, groups, &w).unwrap()
    };
    let err = fd_check(&m.store, &[], &coords, FLOOR, |s, _| {
        let (out, groups) = example_forward(&m, s, &ex, &mut seeded_rng(52))?;
        Ok(compute_loss_with(s, &out, &ex.gt, groups, &w, &plan)?.total)
    });
    assert!(err <= TOL, "end-to-end relative error {err:e}");
    // The planned loss is the training loss at the unperturbed point.
    let mut s = Session::training(&m.store);
    let direct = example_loss(&m, &mut s, &ex, &mut seeded_rng(52)).unwrap().total;
    let direct = s.value(direct).data()[0];
    let mut s = Session::training(&m.store);
    let (out, groups) = example_forward(&m, &mut s, &ex, &mut seeded_rng(52)).unwrap();
    let planned = compute_loss_with(&mut s, &out, &ex.gt, groups, &w, &plan).unwrap().total;
    assert_eq!(s.value(planned).data()[0], direct);
}

