//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)` for every
/// coordinate of every point.
pub fn numerical_gradient<F>(f: &F, points: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for t in 0..points.len() {
        let mut grad = Vec::with_capacity(points[t].numel());
        for k in 0..points[t].numel() {
            let x = points[t].data()[k];
            work[t].data_mut()[k] = x + eps;
            let plus = evaluate(f, &work)?;
            work[t].data_mut()[k] = x - eps;
            let minus = evaluate(f, &work)?;
            work[t].data_mut()[k] = x;
            grad.push((plus - minus) / (2.0 * eps));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Maximum relative error between the backward-pass gradient of `f` and
/// central differences, over every coordinate of every input tensor.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let numeric = numerical_gradient(&f, points, eps)?;
    let mut worst = 0.0f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros;
        let analytic = match g.grad(*v) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), eps)
}
