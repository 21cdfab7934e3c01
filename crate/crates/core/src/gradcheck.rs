//! Central finite-difference gradient reference.
//!
//! Used only by test suites: evaluates the forward twice per coordinate
//! through the tape's naive 64-bit re-evaluation (`Tape::eval_f64`) and
//! never touches the backward path, so it stays an independent check of
//! it.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, ValueId};

/// Central-difference gradient of `build` wrt every coordinate of
/// `inputs[wrt]`, with step `h`.
pub fn finite_difference_grad<F: ?Sized>(build: &F, inputs: &[Tensor], wrt: usize, h: f32) -> Result<Vec<f32>>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.eval_f64(loss)[0])
    };
    let mut grad = Vec::with_capacity(inputs[wrt].numel());
    for i in 0..inputs[wrt].numel() {
        let mut plus = inputs.to_vec();
        plus[wrt].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[wrt].data_mut()[i] -= h;
        grad.push(((eval(&plus)? - eval(&minus)?) / (2.0 * h as f64)) as f32);
    }
    Ok(grad)
}

/// Analytic gradient via the tape's backward pass, for comparison.
pub fn analytic_grad<F: ?Sized>(build: &F, inputs: &[Tensor], wrt: usize) -> Result<Vec<f32>>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| tape.leaf(t.clone(), k == wrt))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(tape.grad(ids[wrt]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[wrt].numel()]))
}

/// Max relative error between analytic and finite-difference gradients,
/// with an absolute floor so near-zero coordinates do not blow up the
/// ratio.
pub fn max_rel_error<F: ?Sized>(build: &F, inputs: &[Tensor], wrt: usize, h: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let num = finite_difference_grad(build, inputs, wrt, h)?;
    let ana = analytic_grad(build, inputs, wrt)?;
    let mut worst = 0.0f64;
    for (&n, &a) in num.iter().zip(&ana) {
        let denom = (n.abs() as f64).max(a.abs() as f64).max(1e-2);
        worst = worst.max(((n - a) as f64).abs() / denom);
    }
    Ok(worst)
}
