use super::{Graph, Tensor, TensorError, Var};

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// Returns the largest elementwise relative error, where each error is
/// divided by `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")).into());
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?)?;
        let out = f(&mut g, v)?;
        let value = g.value(out).item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
            }
            .into());
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
