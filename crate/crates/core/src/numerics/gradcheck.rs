//! Finite-difference verification of reverse-mode gradients.
//!
//! Checks are directional per parameter tensor: perturb the whole tensor
//! along a Rademacher direction and compare the central difference of the
//! loss against the inner product of the analytic gradient with the
//! direction. Several candidate directions are drawn and the one with the
//! largest analytic response is checked, which avoids the null spaces of
//! normalization layers. FD arithmetic runs in f64 on f32 loss values; the
//! pass criterion combines the relative tolerance with an absolute slack
//! derived from the f32 rounding noise of the two loss evaluations, since the
//! difference quotient cannot resolve structure below ulp(loss)/2h.

use rand::Rng;

use crate::numerics::array::Array;
use crate::numerics::graph::Gradients;
use crate::numerics::params::ParamStore;

pub const DEFAULT_REL_TOL: f64 = 1e-3;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;
const CANDIDATE_DIRECTIONS: usize = 4;

/// Relative error with an absolute floor on the denominator.
pub fn rel_error(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor)
}

/// Result of one directional check.
#[derive(Debug)]
pub struct DirectionalCheck {
    pub param: String,
    pub numeric: f64,
    pub analytic: f64,
    pub rel_error: f64,
    /// FD noise floor for this evaluation: ulp-scale error of the two loss
    /// readings divided by the step width.
    pub noise: f64,
}

impl DirectionalCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        let diff = (self.numeric - self.analytic).abs();
        diff <= (rel_tol * self.numeric.abs().max(self.analytic.abs())).max(self.noise)
    }
}

/// Verify the gradient of `loss_fn` for every parameter in `params`.
///
/// `loss_fn` must be a pure function of the store.
pub fn check_all_params<R, F>(
    params: &ParamStore,
    grads: &Gradients,
    mut loss_fn: F,
    h: f32,
    rng: &mut R,
) -> Vec<DirectionalCheck>
where
    R: Rng + ?Sized,
    F: FnMut(&ParamStore) -> f32,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let value = params.get(&name).unwrap().clone();
        let n = value.numel();

        // Pick the candidate direction with the largest analytic response.
        let mut best_dir: Vec<f32> = Vec::new();
        let mut best_analytic = 0.0f64;
        for c in 0..CANDIDATE_DIRECTIONS {
            let dir: Vec<f32> = (0..n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let analytic = match grads.get(&name) {
                Some(g) => g
                    .data()
                    .iter()
                    .zip(&dir)
                    .map(|(g, d)| (*g as f64) * (*d as f64))
                    .sum(),
                None => 0.0,
            };
            if c == 0 || analytic.abs() > best_analytic.abs() {
                best_dir = dir;
                best_analytic = analytic;
            }
        }

        let eval = |sign: f32, loss_fn: &mut F| -> f64 {
            let mut shifted = params.clone();
            let data: Vec<f32> = value
                .data()
                .iter()
                .zip(&best_dir)
                .map(|(v, d)| v + sign * h * d)
                .collect();
            shifted.set(&name, Array::from_vec(value.shape().to_vec(), data));
            loss_fn(&shifted) as f64
        };
        let f_plus = eval(1.0, &mut loss_fn);
        let f_minus = eval(-1.0, &mut loss_fn);
        let numeric = (f_plus - f_minus) / (2.0 * h as f64);
        let noise =
            8.0 * (f32::EPSILON as f64) * f_plus.abs().max(f_minus.abs()).max(1.0) / (2.0 * h as f64);

        out.push(DirectionalCheck {
            rel_error: rel_error(numeric, best_analytic, DEFAULT_ABS_FLOOR),
            param: name,
            numeric,
            analytic: best_analytic,
            noise,
        });
    }
    out
}

/// Assert-style wrapper: panics with a per-parameter report on failure.
pub fn assert_grads_match<R, F>(
    params: &ParamStore,
    grads: &Gradients,
    loss_fn: F,
    h: f32,
    rel_tol: f64,
    rng: &mut R,
) where
    R: Rng + ?Sized,
    F: FnMut(&ParamStore) -> f32,
{
    let checks = check_all_params(params, grads, loss_fn, h, rng);
    let mut failures = Vec::new();
    for c in &checks {
        if !c.passes(rel_tol) {
            failures.push(format!(
                "  {}: numeric {:+.6e} analytic {:+.6e} rel {:.3e} noise {:.3e}",
                c.param, c.numeric, c.analytic, c.rel_error, c.noise
            ));
        }
    }
    assert!(
        failures.is_empty(),
        "gradient check failed for {} of {} parameters:\n{}",
        failures.len(),
        checks.len(),
        failures.join("\n")
    );
}
