//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let y = f(&graph, &vars)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarLoss(y.shape()));
    }
    graph.check_finite()?;
    Ok(y.item())
}

/// Max relative error between reverse-mode and central-difference
/// gradients of a scalar function of several tensors, per input.
pub fn check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
    let y = f(&graph, &vars)?;
    y.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(graph);

    let mut worst = vec![0.0f64; inputs.len()];
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst[which] = worst[which].max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Max over components of `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)` for a
/// scalar-valued `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let errs = check_many(|_, v| f(v[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}
