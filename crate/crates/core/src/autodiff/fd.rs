use super::tensor::Tensor;
use crate::error::{contract, Result};
use crate::par;

/// Central-difference gradient of a scalar function, one evaluation pair per
/// element. Elements are evaluated independently, so the work is spread over
/// the worker pool when the `parallel` feature is enabled.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    if !(h > 0.0) {
        return contract(format!("finite-difference step must be positive, got {h}"));
    }
    let grads: Vec<Result<f64>> = par::map_range(x.numel(), |i| {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = f(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fm = f(&xm)?;
        Ok((fp - fm) / (2.0 * h))
    });
    let data = grads.into_iter().collect::<Result<Vec<f64>>>()?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Largest elementwise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
