use super::Tensor;

/// Central-difference gradient `(f(x+h·e_i) − f(x−h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the usual gradient-check metric.
///
/// The floor keeps the ratio meaningful when both gradients vanish.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::vector(vec![0.3, -1.0, 7.0]);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-6);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }
}
