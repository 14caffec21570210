use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One coordinate of one input to a checked function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar from the inputs bound as enrolled leaves. Returns the
/// largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Coord> = inputs
        .iter()
        .enumerate()
        .flat_map(|(input, t)| (0..t.len()).map(move |index| Coord { input, index }))
        .collect();
    grad_check_at(f, inputs, &coords, h)
}

/// [`grad_check`] restricted to selected coordinates.
pub fn grad_check_at<F>(f: F, inputs: &[Tensor<f64>], coords: &[Coord], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for c in coords {
        if c.input >= inputs.len() || c.index >= inputs[c.input].len() {
            return Err(Error::Argument(format!("coordinate {c:?} out of range")));
        }
        let analytic = grads.get(vars[c.input]).map_or(0.0, |t| t.data()[c.index]);
        let orig = work[c.input].data()[c.index];
        work[c.input].data_mut()[c.index] = orig + h;
        let up = eval(&work)?;
        work[c.input].data_mut()[c.index] = orig - h;
        let down = eval(&work)?;
        work[c.input].data_mut()[c.index] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
