//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] takes a *builder*: a pure function from named parameter
//! tensors to a scalar loss and its analytic gradients (in practice, one
//! construction of the autodiff graph plus a backward sweep). It first proves
//! the builder deterministic by evaluating it twice and demanding bit-equal
//! results — a non-reproducible builder would make every comparison below
//! meaningless — then compares analytic gradients against central
//! differences.
//!
//! Two probing regimes:
//! * **coordinate mode** when the total parameter count is at most
//!   [`GradCheckConfig::max_exact_coords`]: every coordinate is perturbed
//!   individually;
//! * **direction mode** otherwise: random unit directions `u` over the full
//!   parameter vector, comparing the directional derivative `g . u` against
//!   `(f(x + eps u) - f(x - eps u)) / (2 eps)`. This keeps the check
//!   affordable for full models while still exercising every parameter.
//!
//! The relative error of a comparison is `|a - b| / max(|a|, |b|, 1e-8)`; the
//! report carries the worst offender. A deliberately corrupted parameter
//! (its analytic gradient negated) serves as the negative control proving
//! the checker can fail.

use crate::error::NumericsError;
use crate::rng;
use crate::tensor::Tensor;

/// Knobs for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum relative error accepted.
    pub tolerance: f64,
    /// Coordinate mode is used when the total parameter count is at most
    /// this; direction mode otherwise.
    pub max_exact_coords: usize,
    /// Number of random directions in direction mode.
    pub probes: usize,
    /// Seed for probe directions.
    pub seed: u64,
    /// Negative control: negate the analytic gradient of this parameter
    /// before comparing, which must make the check fail.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            max_exact_coords: 512,
            probes: 32,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Number of comparisons performed (coordinates or directions).
    pub probes: usize,
    /// Worst relative error observed.
    pub max_rel_err: f64,
    /// Human-readable location of the worst error.
    pub worst: String,
    /// Tolerance the report was judged against.
    pub tolerance: f64,
    /// `max_rel_err <= tolerance`.
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Verify analytic gradients from `builder` against central differences.
///
/// `builder` maps the parameter list to `(loss, gradients)`; gradients must
/// be keyed by the same names as `params` (order may differ; extras are an
/// error, missing entries are treated as zero gradients and *are* probed,
/// so a dropped gradient shows up as a failure rather than a blind spot).
pub fn grad_check(
    params: &[(String, Tensor)],
    builder: &dyn Fn(&[(String, Tensor)]) -> (f64, Vec<(String, Tensor)>),
    cfg: &GradCheckConfig,
) -> Result<GradReport, NumericsError> {
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    if total == 0 {
        return Err(NumericsError::EmptyGradCheck);
    }

    // Determinism gate: two evaluations must agree to the last bit.
    let (l1, g1) = builder(params);
    let (l2, g2) = builder(params);
    if l1.to_bits() != l2.to_bits() {
        return Err(NumericsError::NonDeterministicBuilder { a: l1, b: l2 });
    }
    for ((na, ta), (nb, tb)) in g1.iter().zip(&g2) {
        if na != nb || ta.data() != tb.data() {
            return Err(NumericsError::NonDeterministicBuilder { a: l1, b: l2 });
        }
    }

    // Gradients aligned to the parameter list; missing names become zeros.
    let mut analytic: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for (name, grad) in g1 {
        let idx = params.iter().position(|(n, _)| *n == name).ok_or_else(|| {
            NumericsError::ShapeMismatch {
                expected: "gradient names drawn from the parameter list".to_string(),
                got: format!("unknown gradient {name}"),
            }
        })?;
        if grad.shape() != params[idx].1.shape() {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{:?} for {name}", params[idx].1.shape()),
                got: format!("{:?}", grad.shape()),
            });
        }
        analytic[idx] = grad;
    }
    if let Some(victim) = &cfg.corrupt {
        let idx = params.iter().position(|(n, _)| n == victim).ok_or_else(|| {
            NumericsError::ShapeMismatch {
                expected: "corrupt target among parameters".to_string(),
                got: victim.clone(),
            }
        })?;
        analytic[idx] = analytic[idx].scale(-1.0);
    }

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut worst = (0.0_f64, String::from("-"));
    let mut probes = 0;

    if total <= cfg.max_exact_coords {
        for pi in 0..work.len() {
            for ci in 0..work[pi].1.numel() {
                let orig = work[pi].1.data()[ci];
                work[pi].1.data_mut()[ci] = orig + cfg.eps;
                let (fp, _) = builder(&work);
                work[pi].1.data_mut()[ci] = orig - cfg.eps;
                let (fm, _) = builder(&work);
                work[pi].1.data_mut()[ci] = orig;
                let fd = (fp - fm) / (2.0 * cfg.eps);
                let re = rel_err(analytic[pi].data()[ci], fd);
                probes += 1;
                if re > worst.0 {
                    worst = (re, format!("{}[{}]", work[pi].0, ci));
                }
            }
        }
    } else {
        let mut prng = rng::stream(cfg.seed, "gradcheck-probe", 0);
        for probe in 0..cfg.probes {
            // A random unit direction across the whole parameter vector.
            let mut dirs: Vec<Tensor> = work
                .iter()
                .map(|(_, t)| {
                    let mut d = Tensor::zeros(t.shape());
                    d.fill_normal(&mut prng, 1.0);
                    d
                })
                .collect();
            let norm = dirs.iter().map(|d| d.l2_norm().powi(2)).sum::<f64>().sqrt();
            for d in dirs.iter_mut() {
                *d = d.scale(1.0 / norm);
            }
            let directional: f64 = analytic
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.data().iter().zip(d.data()).map(|(&a, &b)| a * b).sum::<f64>())
                .sum();
            for (w, d) in work.iter_mut().zip(&dirs) {
                w.1.axpy(cfg.eps, d);
            }
            let (fp, _) = builder(&work);
            for (w, d) in work.iter_mut().zip(&dirs) {
                w.1.axpy(-2.0 * cfg.eps, d);
            }
            let (fm, _) = builder(&work);
            for (w, d) in work.iter_mut().zip(&dirs) {
                w.1.axpy(cfg.eps, d);
            }
            let fd = (fp - fm) / (2.0 * cfg.eps);
            let re = rel_err(directional, fd);
            probes += 1;
            if re > worst.0 {
                worst = (re, format!("direction #{probe}"));
            }
        }
    }

    Ok(GradReport {
        probes,
        max_rel_err: worst.0,
        worst: worst.1,
        tolerance: cfg.tolerance,
        pass: worst.0 <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    /// f(x) = sum((x - c)^2), gradient 2 (x - c): exact analytic form,
    /// independent of the autodiff graph.
    fn quadratic_builder(c: f64) -> impl Fn(&[(String, Tensor)]) -> (f64, Vec<(String, Tensor)>) {
        move |params| {
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for (name, t) in params {
                loss += t.data().iter().map(|&x| (x - c) * (x - c)).sum::<f64>();
                grads.push((name.clone(), t.map(|x| 2.0 * (x - c))));
            }
            (loss, grads)
        }
    }

    fn small_params() -> Vec<(String, Tensor)> {
        vec![
            ("a".to_string(), Tensor::from_vec(&[3], vec![0.4, -1.2, 2.0])),
            ("b".to_string(), Tensor::from_vec(&[2, 2], vec![1.0, 0.2, -0.7, 0.05])),
        ]
    }

    #[test]
    fn quadratic_passes_at_tight_tolerance() {
        let cfg = GradCheckConfig { tolerance: 1e-7, ..Default::default() };
        let report = grad_check(&small_params(), &quadratic_builder(0.3), &cfg).unwrap();
        assert!(report.pass, "quadratic check failed: {report:?}");
        assert_eq!(report.probes, 7, "coordinate mode must probe every coordinate");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let cfg = GradCheckConfig {
            tolerance: 1e-4,
            corrupt: Some("b".to_string()),
            ..Default::default()
        };
        let report = grad_check(&small_params(), &quadratic_builder(0.3), &cfg).unwrap();
        assert!(!report.pass, "negated gradient must fail the check");
        assert!(report.worst.starts_with("b["), "worst offender should be in b, got {}", report.worst);
    }

    #[test]
    fn direction_mode_engages_above_coordinate_cap() {
        let mut t = Tensor::zeros(&[40]);
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = (i as f64) * 0.1 - 2.0;
        }
        let params = vec![("w".to_string(), t)];
        let cfg = GradCheckConfig { max_exact_coords: 10, probes: 8, ..Default::default() };
        let report = grad_check(&params, &quadratic_builder(-0.5), &cfg).unwrap();
        assert!(report.pass, "direction-mode check failed: {report:?}");
        assert_eq!(report.probes, 8);
        assert!(report.worst.starts_with("direction"));
    }

    #[test]
    fn non_deterministic_builder_is_rejected() {
        static CALLS: AtomicU64 = AtomicU64::new(0);
        let builder = |params: &[(String, Tensor)]| {
            let jitter = CALLS.fetch_add(1, Ordering::SeqCst) as f64 * 1e-12;
            let mut loss = jitter;
            let mut grads = Vec::new();
            for (name, t) in params {
                loss += t.data().iter().map(|&x| x * x).sum::<f64>();
                grads.push((name.clone(), t.scale(2.0)));
            }
            (loss, grads)
        };
        let err = grad_check(&small_params(), &builder, &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministicBuilder { .. }));
    }

    #[test]
    fn empty_parameter_list_is_rejected() {
        let err = grad_check(&[], &quadratic_builder(0.0), &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, NumericsError::EmptyGradCheck));
    }

    #[test]
    fn missing_gradient_entries_are_probed_as_zero_and_fail() {
        // The builder "forgets" parameter b's gradient; coordinate probing
        // must still flag b's coordinates instead of skipping them.
        let builder = |params: &[(String, Tensor)]| {
            let mut loss = 0.0;
            for (_, t) in params {
                loss += t.data().iter().map(|&x| x * x).sum::<f64>();
            }
            let grads = vec![("a".to_string(), params[0].1.scale(2.0))];
            (loss, grads)
        };
        let report = grad_check(&small_params(), &builder, &GradCheckConfig::default()).unwrap();
        assert!(!report.pass, "dropped gradient must fail");
        assert!(report.worst.starts_with("b["));
    }
}
