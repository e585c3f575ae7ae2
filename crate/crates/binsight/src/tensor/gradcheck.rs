//! Finite-difference verification of backward rules.
//!
//! The checker never touches the recorded graph when estimating derivatives:
//! it re-runs the forward function with perturbed leaf values and compares
//! central differences against the analytic gradients produced by
//! [`Tensor::backward`]. Probe positions are drawn from a seeded generator so
//! failures are reproducible.

use rand::Rng;

use super::Tensor;
use crate::seed::rng_from;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients of `f` (a scalar-valued function of `inputs`)
/// against central finite differences at `probes` random coordinates.
///
/// `inputs` must be `requires_grad` leaves. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-3)` so that near-zero derivative pairs are
/// judged on an absolute scale.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, probes: usize, h: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for x in inputs {
        x.zero_grad();
        assert!(x.is_requires_grad(), "gradcheck inputs must require grad");
    }
    let loss = f(inputs);
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut rng = rng_from(seed);
    let mut report = GradCheckReport {
        probes,
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for _ in 0..probes {
        let ti = rng.gen_range(0..inputs.len());
        let ei = rng.gen_range(0..inputs[ti].len());
        let original = inputs[ti].to_vec()[ei];

        set_elem(&inputs[ti], ei, original + h);
        let plus = f(inputs).item();
        set_elem(&inputs[ti], ei, original - h);
        let minus = f(inputs).item();
        set_elem(&inputs[ti], ei, original);

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti][ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    for x in inputs {
        x.zero_grad();
    }
    report
}

fn set_elem(t: &Tensor, idx: usize, value: f64) {
    t.apply_update(|i, v| {
        if i == idx {
            *v = value;
        }
    });
}
