//! Central finite differences, used as a gradient oracle.

/// Central-difference derivative of a scalar function.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of `f` at `x`, perturbing one coordinate at a time.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(‖a‖∞, floor)` — a relative error that stays meaningful
/// when individual components vanish.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = gradient(|x| x[0] * x[0] + 3.0 * x[0] * x[1], &[1.0, 2.0], 1e-3);
        assert!((g[0] - 8.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
        assert!((derivative(f64::exp, 0.0, 1e-5) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_uses_scale() {
        assert_eq!(max_relative_error(&[0.0, 2.0], &[0.0, 2.0], 1e-12), 0.0);
        assert!((max_relative_error(&[1.0, 4.0], &[1.0, 3.0], 1e-12) - 0.25).abs() < 1e-15);
    }
}
