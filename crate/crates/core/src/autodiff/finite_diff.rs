use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function at `point`.
pub fn finite_diff(f: impl Fn(&Tensor) -> f64, point: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = point.data().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::from_raw(point.shape().to_vec(), probe.clone()));
        probe[i] = orig - h;
        let down = f(&Tensor::from_raw(point.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_raw(point.shape().to_vec(), out)
}

/// Largest coordinate error scaled by the reference's magnitude:
/// `max_i |a_i − b_i| / max(‖b‖_∞, floor)`.
///
/// Per-coordinate ratios are meaningless for coordinates that are zero up to
/// rounding, so the error is measured against the size of the gradient.
pub fn max_relative_error(actual: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(floor, |m, v| m.max(v.abs()));
    actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_sum_gives_ones() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -4.0, 2.5, 7.0, 0.0, 1.0]).unwrap();
        let g = finite_diff(|t| t.sum(), &x, 1e-5);
        assert_eq!(g.shape(), &[2, 3]);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squared_norm() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }
}
