use super::tensor::Tensor;

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, point: &Tensor, eps: f64) -> Tensor {
    let mut probe = point.clone();
    let mut out = Tensor::zeros(point.shape().to_vec());
    for i in 0..point.numel() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)` taken over whole tensors (2-norm).
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(floor)
}
