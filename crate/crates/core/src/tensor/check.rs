//! Central finite differences, the reference every backward rule is tested
//! against.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the autodiff gradient of the scalar function `f` at `x` with
/// central differences and returns the largest relative error.
///
/// `f` is rebuilt on a fresh graph for every evaluation. Callers must pick
/// points away from the kinks of `relu`/`maxpool2`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    let graph = Graph::new();
    let leaf = graph.tensor(shape, x.to_vec(), true)?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let numeric = numerical_gradient(
        |v| {
            let g = Graph::new();
            let t = g.tensor(shape, v.to_vec(), false)?;
            Ok(f(&t)?.item())
        },
        x,
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
