use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar graph against central
/// differences and returns the worst
/// `|analytic - numeric| / max(1, |analytic|)` over every parameter entry.
///
/// `f` is rebuilt from scratch for every perturbation, so it must be a pure
/// function of the parameter values it receives.
pub fn fd_gradcheck<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..params[pi].numel() {
            let x0 = params[pi].data()[i];
            probe[pi].data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
