use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the largest relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over every
/// entry of every parameter.
///
/// `f` receives a fresh graph and one leaf per parameter, in order.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_step(f, params, FD_STEP)
}

pub fn grad_check_with_step<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        let v = g.value(root);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.get(0, 0))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.len() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
