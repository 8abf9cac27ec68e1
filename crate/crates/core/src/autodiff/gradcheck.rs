use ndarray::Array2;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn eval_loss<T, F>(params: &[Array2<T>], loss_fn: &F) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    if loss.shape() != (1, 1) {
        return Err(Error::Contract("loss must be scalar".into()));
    }
    Ok(loss.item())
}

/// Compares reverse-mode gradients against central differences.
///
/// Returns `max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over every
/// coordinate of every parameter.
pub fn finite_difference_check<T, F>(params: &[Array2<T>], step: T, loss_fn: F) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(step > T::zero() && step <= T::of(1e-3)) {
        return Err(Error::Oracle(format!("step {step} outside (0, 1e-3]")));
    }

    let base = eval_loss(params, &loss_fn)?;
    let again = eval_loss(params, &loss_fn)?;
    if base.to_f64_lossy().to_bits() != again.to_f64_lossy().to_bits() {
        return Err(Error::Oracle(format!(
            "loss is not deterministic: {base:e} then {again:e}"
        )));
    }

    let analytic: Vec<Array2<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|&v| grads.wrt(v).cloned().expect("leaf is tracked"))
            .collect()
    };

    let floor = T::of(1e-8);
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut work: Vec<Array2<T>> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = work[p][[r, c]];
            work[p][[r, c]] = orig + step;
            let plus = eval_loss(&work, &loss_fn)?;
            work[p][[r, c]] = orig - step;
            let minus = eval_loss(&work, &loss_fn)?;
            work[p][[r, c]] = orig;

            let fd = (plus - minus) / (two * step);
            let ad = grad[[r, c]];
            let rel = (ad - fd).abs() / floor.max(ad.abs() + fd.abs());
            if rel > worst || rel.is_nan() {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
