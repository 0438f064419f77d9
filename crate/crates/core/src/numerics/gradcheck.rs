/// Compares an analytic gradient against central differences.
///
/// `loss_fn` returns `(loss, analytic_grad)` at the given point. The result is
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`, evaluated at `params`.
/// Never fails: a mismatch is reported through the returned error size.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (up, _) = loss_fn(&x);
        x[i] = orig - eps;
        let (down, _) = loss_fn(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic.get(i).copied().unwrap_or(f64::NAN);
        let err = (a - fd).abs() / fd.abs().max(1.0);
        // NaN must surface as a failure, not vanish in max()
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}
