//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Check a random subset of this many coordinates when the input is larger.
    pub max_elements: Option<usize>,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_elements: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, or the first non-finite evaluation.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

/// Compare `analytic` (the claimed gradient of `f` at `x`) against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<E: std::fmt::Display>(
    f: impl Fn(&[f64]) -> Result<f64, E>,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let fail = |idx: Option<usize>, msg: String| GradCheckReport {
        max_rel_err: f64::INFINITY,
        worst_index: idx,
        checked: 0,
        passed: false,
        failure: Some(msg),
    };
    if x.len() != analytic.len() {
        return fail(
            None,
            format!(
                "gradient has {} entries for {} inputs",
                analytic.len(),
                x.len()
            ),
        );
    }
    match f(x) {
        Ok(v) if v.is_finite() => {}
        Ok(v) => return fail(None, format!("forward value is {v}")),
        Err(e) => return fail(None, format!("forward failed: {e}")),
    }

    let indices: Vec<usize> = match cfg.max_elements {
        Some(m) if m < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, x.len(), m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };

    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + cfg.step;
        let plus = f(&probe);
        probe[i] = orig - cfg.step;
        let minus = f(&probe);
        probe[i] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => return fail(Some(i), format!("non-finite evaluation at coordinate {i}")),
        };
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i];
        if !a.is_finite() {
            return fail(
                Some(i),
                format!("analytic gradient is {a} at coordinate {i}"),
            );
        }
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst || worst_index.is_none() {
            worst = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_err: worst,
        worst_index,
        checked: indices.len(),
        passed: worst < cfg.tol,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn tanh_at_zero() {
        let r = grad_check(
            |x: &[f64]| Ok::<_, Infallible>(x[0].tanh()),
            &[0.0],
            &[1.0],
            &GradCheckConfig::default(),
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = grad_check(
            |x: &[f64]| Ok::<_, Infallible>(x[0] * x[0]),
            &[1.5],
            &[2.0],
            &GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(0));
    }

    #[test]
    fn non_finite_forward_reports_location() {
        let r = grad_check(
            |x: &[f64]| Ok::<_, Infallible>(if x[1] > 1.0 { f64::NAN } else { x[0] }),
            &[0.0, 1.0],
            &[1.0, 0.0],
            &GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(1));
    }

    #[test]
    fn subsampling_limits_work() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let cfg = GradCheckConfig {
            max_elements: Some(10),
            ..Default::default()
        };
        let r = grad_check(
            |x: &[f64]| Ok::<_, Infallible>(x.iter().map(|v| v * v).sum()),
            &x,
            &g,
            &cfg,
        );
        assert!(r.passed);
        assert_eq!(r.checked, 10);
    }
}
