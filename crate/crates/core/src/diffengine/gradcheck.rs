use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)` over all
/// coordinates of `x`. `f` must build its computation from the `Var` it is
/// handed and return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_coords(f, x, h, 0..x.len())
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F, I>(f: F, x: &Tensor, h: f64, coords: I) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    I: IntoIterator<Item = usize>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {base}")));
    }
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(xv)
        .ok_or_else(|| Error::invalid("no gradient for checked input"))?
        .clone();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0_f64;
    for i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "f not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
