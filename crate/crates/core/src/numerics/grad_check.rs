//! Central-finite-difference verification of analytic gradients.

use super::tape::ParameterSet;
use crate::{Error, Result};

/// Compare the analytic gradients produced by `loss_fn` against central
/// finite differences with the given step, returning the max relative error
/// over all scalar parameter entries.
///
/// `loss_fn(params, with_grad)` must return the loss value; when `with_grad`
/// is true it must also zero and then fill the gradient buffers of `params`.
/// The function must be deterministic given `params`; this is checked by
/// evaluating twice at the base point.
pub fn check_gradients<F>(mut loss_fn: F, params: &mut ParameterSet, step: f64) -> Result<f64>
where
    F: FnMut(&mut ParameterSet, bool) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let base = loss_fn(params, true)?;
    let repeat = loss_fn(params, false)?;
    if base.to_bits() != repeat.to_bits() {
        return Err(Error::State(format!(
            "loss_fn is not deterministic: {base} vs {repeat}"
        )));
    }
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|slot| params.grad(slot).data().to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    for slot in 0..params.len() {
        for i in 0..params.value(slot).len() {
            let orig = params.value(slot).data()[i];
            params.value_mut(slot).data_mut()[i] = orig + step;
            let hi = loss_fn(params, false)?;
            params.value_mut(slot).data_mut()[i] = orig - step;
            let lo = loss_fn(params, false)?;
            params.value_mut(slot).data_mut()[i] = orig;
            let cd = (hi - lo) / (2.0 * step);
            let an = analytic[slot][i];
            let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    // Restore gradient buffers to the analytic values at the base point.
    loss_fn(params, true)?;
    Ok(max_rel)
}
