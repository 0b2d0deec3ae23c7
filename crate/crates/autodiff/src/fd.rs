use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient estimate `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// for every coordinate of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|, 1e-6)`, the
/// scale-normalized disagreement between two gradient estimates. The floor
/// keeps finite-difference round-off on an exactly-zero gradient from
/// registering as a relative error of 1.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let scale = a.linf_norm().max(b.linf_norm()).max(1e-6);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
