//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the loss from one leaf per entry of `inputs`. At most
/// `max_coords` coordinates per input are probed (all of them when the
/// input is smaller). Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, max_coords: usize, rng: &mut impl Rng) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFiniteLoss { value: v });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(TensorError::NonFiniteLoss { value: lv });
    }
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic: Vec<f64> = grads.wrt(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = input.data()[c];
            probe[i].data_mut()[c] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[c] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
