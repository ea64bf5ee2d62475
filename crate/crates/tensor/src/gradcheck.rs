//! Central finite differences, used as an oracle for analytic gradients.
//!
//! Nothing here touches the backward pass: every routine only evaluates the
//! forward function at perturbed points.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor for [`relative_error`]; central-difference rounding noise
/// at `DEFAULT_STEP` sits several orders of magnitude below it.
pub const DEFAULT_FLOOR: f64 = 1e-7;

/// `∂f/∂x` by central differences with the given step.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Numeric gradient of `loss` with respect to every scalar of parameter `id`.
/// The store is restored before returning.
pub fn numeric_param_gradient<F>(
    store: &mut ParamStore,
    id: ParamId,
    mut loss: F,
    step: f64,
) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let n = store.get(id).numel();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let plus = loss(store);
        store.get_mut(id).data_mut()[i] = orig - step;
        let minus = loss(store);
        store.get_mut(id).data_mut()[i] = orig;
        *o = (plus? - minus?) / (2.0 * step);
    }
    Tensor::new(store.get(id).shape().to_vec(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`: norm-wise relative error, with an
/// absolute floor so that two near-zero gradients compare as equal.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
