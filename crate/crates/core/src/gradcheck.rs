//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to verify.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm();
    diff / a.norm().max(b.norm()).max(1e-12)
}

/// Evaluates a scalar function of `inputs` once.
pub fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Numerical gradient of `f` with respect to input `which`.
pub fn numerical_gradient<F>(inputs: &[Tensor], which: usize, f: &F, eps: f64) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + eps;
        let plus = evaluate(&work, f)?;
        work[which].data_mut()[i] = orig - eps;
        let minus = evaluate(&work, f)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out);
    Ok(vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = (0..inputs.len())
        .map(|i| numerical_gradient(inputs, i, &f, opts.eps))
        .collect::<Result<Vec<_>>>()?;
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheckReport {
        analytic,
        numeric,
        relative_errors,
    })
}
