use super::{Graph, ParamId, ParamStore, Value};
use crate::error::{Error, Result};

/// Compares reverse-accumulated gradients with central finite differences.
///
/// `loss` rebuilds the graph from the current parameter values and returns
/// the scalar root. Every coordinate of every parameter in `params` is
/// perturbed by `±eps`; the returned figure is the maximum of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Parameter values are restored before returning.
pub fn check_gradients<F>(loss: F, store: &mut ParamStore, params: &[ParamId], eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Graph, Value)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::domain(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let (g, root) = loss(s)?;
        g.item(root)
    };

    let (graph, root) = loss(store)?;
    let first = graph.item(root)?;
    let again = eval(store)?;
    if first.to_bits() != again.to_bits() {
        return Err(Error::Inconsistent(format!(
            "loss closure returned {first} then {again} for identical parameters"
        )));
    }
    let grads = graph.backward(root)?;

    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.value(id).len();
        let analytic = grads.param(id).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
