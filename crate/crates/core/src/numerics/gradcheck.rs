use super::{Graph, Var};
use crate::error::{ensure, Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` receives a fresh graph and a leaf holding the evaluation point and
/// must return a scalar. The result is
/// `max_i |autodiff_i − fd_i| / (|fd_i| + 1e-8)`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    ensure!(step > 0.0 && step.is_finite(), "finite-difference step must be positive");
    ensure!(!point.is_empty(), "empty evaluation point");

    let eval = |x: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::<f64>::new();
        let leaf = g.leaf([x.len()], x.to_vec(), with_grad)?;
        let out = f(&mut g, leaf)?;
        let value = g.scalar(out)?;
        if !value.is_finite() {
            return Err(Error::numeric("function value is not finite"));
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let grad = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((value, grad))
    };

    let (_, analytic) = eval(point, true)?;
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("autodiff gradient is not finite"));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (plus, _) = eval(&x, false)?;
        x[i] = orig - step;
        let (minus, _) = eval(&x, false)?;
        x[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
