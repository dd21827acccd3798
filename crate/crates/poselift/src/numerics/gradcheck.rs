//! Finite-difference verification of reverse-mode gradients.
//!
//! The loss is expressed as a closure that records onto a fresh tape; the
//! checker compares the tape's gradients against central differences
//! `(f(p+eps) - f(p-eps)) / (2 eps)` for every parameter component. Runs at
//! 64-bit precision only.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{Mode, Tape, Var};

/// Floor for the relative-error denominator so near-zero gradient pairs do
/// not blow up the ratio.
const DENOM_FLOOR: f64 = 1e-6;

/// Returns the maximum over all parameter components of the relative error
/// between the reverse-mode gradient and the central finite difference.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }

    // Reverse-mode pass.
    let mut tape = Tape::new(Mode::Eval);
    let loss = loss_fn(&mut tape, store)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Dimension("grad_check loss must be scalar".into()));
    }
    let base = tape.scalar_value(loss);
    if !base.is_finite() {
        return Err(Error::Numeric("grad_check loss is not finite".into()));
    }
    tape.backward(loss)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new(Mode::Eval);
        let l = loss_fn(&mut t, store)?;
        let v = t.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check loss is not finite".into()));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let ad = tape
            .param_grad(id)
            .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]);
        for comp in 0..ad.len() {
            let orig = store.tensor(id).data()[comp];
            store.tensor_mut(id).data_mut()[comp] = orig + eps;
            let plus = eval(store)?;
            store.tensor_mut(id).data_mut()[comp] = orig - eps;
            let minus = eval(store)?;
            store.tensor_mut(id).data_mut()[comp] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let denom = ad[comp].abs().max(fd.abs()).max(DENOM_FLOOR);
            let rel = (ad[comp] - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
