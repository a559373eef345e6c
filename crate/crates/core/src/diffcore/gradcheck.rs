use super::{DiffError, Graph, Tensor, Var};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar from the leaf it is handed. Returns the maximum over
/// coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(DiffError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-8, 1e-3]"
        )));
    }
    let eval = |t: Tensor| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if !v.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        let out = v.data()[0];
        if !out.is_finite() {
            return Err(DiffError::NonFinite { op: "finite_difference_check" });
        }
        Ok(out)
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
