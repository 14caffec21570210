#![allow(dead_code)]

use efh::params::{ParamId, ParamStore};
use efh::{Result, Session};
use efh_numcore::{seeded_rng, Tensor, Var};
use rand::Rng;

/// Central-difference step used by every check.
pub const FD_STEP: f64 = 1e-6;

/// Adds `U(-scale, scale)` noise to every parameter so that zero-initialized
/// heads carry gradient through the whole network.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = seeded_rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// `|analytic - numeric| / max(|numeric|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}

/// A coordinate to check: a parameter entry or an entry of an extra input.
#[derive(Debug, Clone, Copy)]
pub enum Coord {
    Param(ParamId, usize),
    Input(usize, usize),
}

/// Worst relative error of reverse-mode gradients of `f` against central
/// differences at `coords`. `f` receives the extra `inputs` as leaves.
pub fn fd_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], coords: &[Coord], floor: f64, f: F) -> f64
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut s = Session::training(store);
        let vars: Vec<Var> = inputs.iter().map(|t| s.g.leaf(t.clone(), true)).collect();
        let out = f(&mut s, &vars).expect("forward");
        s.value(out).data()[0]
    };
    let mut s = Session::training(store);
    let vars: Vec<Var> = inputs.iter().map(|t| s.g.leaf(t.clone(), true)).collect();
    let out = f(&mut s, &vars).expect("forward");
    let pgrads = s.param_grads(out).expect("backward");
    let igrads = s.g.backward(out).expect("backward");

    let mut store = store.clone();
    let mut inputs = inputs.to_vec();
    let mut worst = 0.0f64;
    for &c in coords {
        let analytic = match c {
            Coord::Param(id, i) => pgrads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]),
            Coord::Input(k, i) => igrads.get(vars[k]).map_or(0.0, |g| g.data()[i]),
        };
        let at = |delta: f64, store: &mut ParamStore<f64>, inputs: &mut Vec<Tensor<f64>>| -> f64 {
            let slot = match c {
                Coord::Param(id, i) => &mut store.get_mut(id).data_mut()[i],
                Coord::Input(k, i) => &mut inputs[k].data_mut()[i],
            };
            let orig = *slot;
            *slot = orig + delta;
            let v = eval(store, inputs);
            let slot = match c {
                Coord::Param(id, i) => &mut store.get_mut(id).data_mut()[i],
                Coord::Input(k, i) => &mut inputs[k].data_mut()[i],
            };
            *slot = orig;
            v
        };
        let up = at(FD_STEP, &mut store, &mut inputs);
        let down = at(-FD_STEP, &mut store, &mut inputs);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric, floor));
    }
    worst
}

/// `n` random parameter coordinates among ids accepted by `keep`.
pub fn sample_params(store: &ParamStore<f64>, n: usize, seed: u64, keep: impl Fn(&str) -> bool) -> Vec<Coord> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| keep(store.name(id))).collect();
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            Coord::Param(id, rng.random_range(0..store.get(id).len()))
        })
        .collect()
}

/// Every coordinate of every input.
pub fn all_inputs(inputs: &[Tensor<f64>]) -> Vec<Coord> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| Coord::Input(k, i)))
        .collect()
}

/// Contracts any output with fixed random weights into a scalar.
pub fn project(s: &mut Session<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(s.g.shape(y), -1.0, 1.0, &mut seeded_rng(seed));
    let w = s.constant(w);
    let p = s.g.mul(y, w)?;
    Ok(s.g.sum(p)?)
}
