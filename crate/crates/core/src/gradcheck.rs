//! Finite-difference gradient oracle.
//!
//! Only evaluates forward passes, so it stays independent of the hand-written
//! backward rules it is used to audit.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at `floor` so that coordinates
/// with vanishing gradient are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite-difference check of `d f / d input` at every coordinate listed.
///
/// `f` rebuilds the scalar function from scratch for a given input tensor.
/// Returns the worst relative error, with denominators floored at `floor`.
pub fn finite_difference_check(
    input: &Tensor,
    coords: &[usize],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &Tensor,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &c in coords {
        let mut plus = input.clone();
        plus.data_mut()[c] += h;
        let mut minus = input.clone();
        minus.data_mut()[c] -= h;
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * h);
        let a = analytic.data()[c];
        let rel = relative_error(a, numeric, floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks every input of a graph-building closure against central finite
/// differences. `build` receives one tracked leaf per input and returns a
/// scalar. Returns the worst relative error over all coordinates.
pub fn check_inputs(inputs: &[Tensor], floor: f64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = graph.grad_or_zeros(vars[slot]);
        let coords: Vec<usize> = (0..input.numel()).collect();
        let err = finite_difference_check(
            input,
            &coords,
            DEFAULT_STEP,
            floor,
            |perturbed| {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| g.constant(if i == slot { perturbed.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vs)?;
                Ok(g.value(out).item())
            },
            &analytic,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
