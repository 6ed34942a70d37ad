//! Finite-difference checks of the backward pass.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients and central
/// differences of `sum(f(inputs) * r)`, with `r` a fixed random weighting.
/// At most `max_coords` coordinates per input are checked, picked at random.
pub fn max_error<F>(inputs: &[Tensor], rng: &mut Rng, max_coords: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let r = Tensor::from_fn(g.shape(out).to_vec(), |_| rng.normal());
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    let s = g.sum(prod)?;
    g.backward(s)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        rng.shuffle(&mut coords);
        coords.truncate(max_coords);
        for j in coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs)?;
            worst = worst.max(rel_err(grads[i].data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}
