use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// differences and returns the largest relative error
/// `max(|a - n| - r, 0) / max(|a|, |n|, 1e-8)` over all coordinates of `x`.
///
/// `r` is the resolution of the difference quotient: two units of rounding
/// in the function value, divided by `2 * eps`. Without it a gradient that is
/// exactly zero (a key bias under softmax attention, say) scores one rounding
/// step over the `1e-8` floor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .ok_or_else(|| Error::Contract("input leaf received no gradient".into()))?
        .clone();

    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::from_parts(x.shape().to_vec(), point), false);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let numeric = (fp - fm) / (2.0 * eps);
        let resolution = 2.0 * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = ((a - numeric).abs() - resolution).max(0.0) / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
