//! Central-difference gradient verification.

use super::{Graph, TensorError, TensorRef};
use crate::scalar::Scalar;

/// Compares the analytic gradient of a scalar-valued graph against central
/// differences.
///
/// `build` receives a fresh graph plus leaves created from `inputs` and must
/// return the scalar loss. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`. Run at `f64` for
/// tight bounds; at `f32` pick `eps` around 1e-2 so the forward rounding
/// noise stays below the difference quotient.
pub fn grad_check<T, F>(
    build: F,
    inputs: &[(Vec<T>, Vec<usize>)],
    eps: f64,
) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[TensorRef]) -> Result<TensorRef, TensorError>,
{
    let eval = |data: &[Vec<T>], requires_grad: bool| -> Result<(Graph<T>, TensorRef), TensorError> {
        let mut g = Graph::new();
        let refs: Vec<TensorRef> = data
            .iter()
            .zip(inputs.iter())
            .map(|(vals, (_, shape))| g.leaf(vals.clone(), shape, requires_grad))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut g, &refs)?;
        if g.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss { shape: g.shape(loss).to_vec() });
        }
        Ok((g, loss))
    };

    let base: Vec<Vec<T>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let step = T::from_f64(eps);

    let (mut g, loss) = eval(&base, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = (0..inputs.len())
        .map(|k| {
            let t = TensorRef(k);
            g.grad(t).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); g.numel(t)])
        })
        .collect();

    let mut max_err = 0.0f64;
    for k in 0..inputs.len() {
        for j in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][j] += step;
            let (gp, lp) = eval(&plus, false)?;
            let fp = gp.values(lp)[0].to_f64();

            let mut minus = base.clone();
            minus[k][j] -= step;
            let (gm, lm) = eval(&minus, false)?;
            let fm = gm.values(lm)[0].to_f64();

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k][j].to_f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
