//! Finite-difference gradient checking.
//!
//! Central differences with a rebuild-per-perturbation closure: the
//! caller supplies the loss as a pure function of a flat parameter
//! vector, and the harness probes one coordinate at a time.

/// Central finite differences of `f` at `x` with the given step.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest per-entry relative error between two gradient vectors.
///
/// Entries where both magnitudes are below `atol` count as equal; they
/// are at finite-difference noise level and carry no signal.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.abs() < atol && n.abs() < atol {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let fd = central_diff(f, &x, 1e-5);
        let exact = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&exact, &fd, 1e-10) < 1e-9);
    }

    #[test]
    fn rel_err_flags_disagreement() {
        assert!(max_rel_err(&[1.0, 0.0], &[1.0, 0.5], 1e-8) > 0.9);
        assert_eq!(max_rel_err(&[0.0], &[0.0], 1e-8), 0.0);
    }
}
