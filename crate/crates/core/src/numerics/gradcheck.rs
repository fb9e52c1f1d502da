use crate::scalar::Scalar;

/// Largest relative disagreement between `analytic` and central differences
/// of `f` around `point`: `max_i |g_i - fd_i| / max(1, |g_i|)`.
///
/// `eps` is expected in `[1e-6, 1e-2]` and `f` must be deterministic.
pub fn grad_check<T: Scalar>(f: impl Fn(&[T]) -> T, analytic: &[T], point: &[T], eps: T) -> T {
    assert_eq!(analytic.len(), point.len(), "gradient and point lengths differ");
    let two = T::lit(2.0);
    let mut x = point.to_vec();
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (two * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(T::one());
        worst = worst.max(err);
    }
    worst
}
