//! Central finite-difference checks against the tape's reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are zero.
pub fn relative_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> S {
    let diff: S = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<S>()
        .sqrt();
    let scale = a.squared_norm().sqrt().max(b.squared_norm().sqrt());
    if scale == S::zero() {
        diff
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` at every input by central differences with step `h`.
pub fn numeric_gradients<S, F>(inputs: &[Tensor<S>], f: F, h: S) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<S>]| -> Result<S> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if tape.shape(out) != (1, 1) {
            return Err(Error::arg("gradient check needs a scalar function"));
        }
        Ok(tape.scalar(out))
    };
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let two_h = h + h;
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / two_h;
        }
        out.push(g);
    }
    Ok(out)
}

/// Reverse-mode gradients of `f` at every input.
pub fn analytic_gradients<S, F>(inputs: &[Tensor<S>], f: F) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Per-input relative error between reverse-mode and central-difference gradients.
pub fn gradient_check<S, F>(inputs: &[Tensor<S>], f: F, h: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect())
}
