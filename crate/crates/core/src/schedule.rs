//! Noise schedules and the closed-form diffusion quantities: forward
//! corruption, the DDPM posterior, and DDIM step coefficients.
//!
//! Schedule scalars are kept in f64; the tensors they multiply stay f32.

use crate::error::{Error, Result};
use crate::numerics::array::Array;

/// Per-step noise ratios and cumulative products for N diffusion steps.
/// `alpha_bar(0) = 1`; `alpha_bar` is strictly decreasing and every value is
/// in (0, 1].
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    n_steps: usize,
    betas: Vec<f64>,      // beta_1..beta_N at indices 0..N-1
    alpha_bars: Vec<f64>, // alpha_bar_0..alpha_bar_N at indices 0..N
}

pub const COSINE_S: f64 = 0.008;
pub const BETA_CLIP: f64 = 0.999;

/// Schedule constructors selectable by name from config. Only the cosine
/// schedule is registered; the hook exists so configs stay forward-compatible.
pub fn schedule_registry() -> &'static [(&'static str, fn(usize) -> Result<NoiseSchedule>)] {
    &[("cosine", cosine_schedule)]
}

pub fn build_schedule(name: &str, n_steps: usize) -> Result<NoiseSchedule> {
    for (known, build) in schedule_registry() {
        if *known == name {
            return build(n_steps);
        }
    }
    Err(Error::UnknownName {
        kind: "noise schedule",
        name: name.to_string(),
        known: schedule_registry()
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", "),
    })
}

/// Cosine schedule: alpha_bar(n) = f(n)/f(0) with
/// f(t) = cos^2(((t/N + s)/(1 + s)) * pi/2), s = 0.008, and
/// beta_n = 1 - alpha_bar(n)/alpha_bar(n-1) clipped to <= 0.999.
/// After clipping, alpha_bars are rebuilt as the running product of
/// (1 - beta_n) so the product invariant holds exactly.
pub fn cosine_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(Error::invalid("cosine_schedule", "N must be >= 1"));
    }
    let f = |t: f64| -> f64 {
        let inner = ((t / n_steps as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
        inner.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut betas = Vec::with_capacity(n_steps);
    let mut prev = 1.0f64;
    for n in 1..=n_steps {
        let ab = f(n as f64) / f0;
        let beta = (1.0 - ab / prev).min(BETA_CLIP);
        betas.push(beta);
        prev = ab;
    }
    let mut alpha_bars = Vec::with_capacity(n_steps + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0f64;
    for &beta in &betas {
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        n_steps,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// beta_n for n in 1..=N.
    pub fn beta(&self, n: usize) -> f64 {
        assert!((1..=self.n_steps).contains(&n), "beta index {n}");
        self.betas[n - 1]
    }

    /// alpha_bar_n for n in 0..=N.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        assert!(n <= self.n_steps, "alpha_bar index {n}");
        self.alpha_bars[n]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.beta(n)
    }
}

/// Forward corruption: sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps.
/// n = 0 returns x0 exactly (alpha_bar_0 = 1).
pub fn q_sample(x0: &Array, n: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array> {
    if n > sched.n_steps() {
        return Err(Error::invalid(
            "q_sample",
            format!("step {n} out of range 0..={}", sched.n_steps()),
        ));
    }
    if eps.shape() != x0.shape() {
        return Err(Error::Shape {
            op: "q_sample",
            dim: "eps numel",
            got: eps.numel(),
            expected: x0.numel(),
        });
    }
    let ab = sched.alpha_bar(n);
    let a = ab.sqrt() as f32;
    let b = (1.0 - ab).sqrt() as f32;
    Ok(crate::numerics::array::axpby(a, x0, b, eps))
}

/// DDPM posterior mean and variance for 2 <= n <= N:
///
/// mu = (sqrt(ab_{n-1}) beta_n / (1 - ab_n)) x0_hat
///      + (sqrt(alpha_n) (1 - ab_{n-1}) / (1 - ab_n)) x_n,
/// var = ((1 - ab_{n-1}) / (1 - ab_n)) beta_n.
///
/// The n = 1 branch of the sampler returns x0_hat without resampling, so this
/// rejects n < 2.
pub fn ddpm_posterior(
    x0_hat: &Array,
    x_n: &Array,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<(Array, f64)> {
    if n < 2 || n > sched.n_steps() {
        return Err(Error::invalid(
            "ddpm_posterior",
            format!("step {n} out of range 2..={}", sched.n_steps()),
        ));
    }
    let ab_n = sched.alpha_bar(n);
    let ab_prev = sched.alpha_bar(n - 1);
    let beta = sched.beta(n);
    let alpha = sched.alpha(n);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_n);
    let cn = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_n);
    let mu = crate::numerics::array::axpby(c0 as f32, x0_hat, cn as f32, x_n);
    let var = (1.0 - ab_prev) / (1.0 - ab_n) * beta;
    Ok((mu, var))
}

/// One DDIM step from timestep t_n down to t_prev (t_prev < t_n; t_prev may
/// be 0, in which case the formula reduces to x0_hat exactly):
/// sigma = eta sqrt((1-ab_prev)/(1-ab_n)) sqrt(1 - ab_n/ab_prev);
/// out = sqrt(ab_prev) x0_hat
///     + sqrt(1 - ab_prev - sigma^2) (x_tn - sqrt(ab_n) x0_hat)/sqrt(1-ab_n)
///     + sigma * noise.
pub fn ddim_step(
    x0_hat: &Array,
    x_tn: &Array,
    t_n: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    noise: &Array,
) -> Result<Array> {
    if t_prev >= t_n || t_n > sched.n_steps() {
        return Err(Error::invalid(
            "ddim_step",
            format!("need t_prev < t_n <= N, got t_prev={t_prev}, t_n={t_n}"),
        ));
    }
    if eta < 0.0 {
        return Err(Error::invalid("ddim_step", "eta must be >= 0"));
    }
    let ab_n = sched.alpha_bar(t_n);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(t_n, t_prev, eta, sched);
    let dir_coeff_sq = 1.0 - ab_prev - sigma * sigma;
    if dir_coeff_sq < 0.0 {
        return Err(Error::invalid(
            "ddim_step",
            format!("1 - alpha_bar(t_prev) - sigma^2 = {dir_coeff_sq} < 0 (eta {eta} too large for timesteps {t_prev}<-{t_n})"),
        ));
    }
    let dir_coeff = dir_coeff_sq.sqrt() / (1.0 - ab_n).sqrt();
    // out = [sqrt(ab_prev) - dir*sqrt(ab_n)] x0_hat + dir * x_tn + sigma * noise
    let a = (ab_prev.sqrt() - dir_coeff * ab_n.sqrt()) as f32;
    let mut out = crate::numerics::array::axpby(a, x0_hat, dir_coeff as f32, x_tn);
    if sigma > 0.0 {
        out = crate::numerics::array::axpby(1.0, &out, sigma as f32, noise);
    }
    Ok(out)
}

/// The DDIM noise scale for a (t_n -> t_prev) transition.
pub fn ddim_sigma(t_n: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> f64 {
    let ab_n = sched.alpha_bar(t_n);
    let ab_prev = sched.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab_n)).sqrt() * (1.0 - ab_n / ab_prev).sqrt()
}

/// Uniformly spaced DDIM timestep subsequence: {stride, 2*stride, ..., N}
/// with stride = N / count (count <= N required; N divisible by count keeps
/// the spacing exact, otherwise strides are rounded down and the last step is
/// pinned to N).
pub fn ddim_timesteps(n_steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > n_steps {
        return Err(Error::invalid(
            "ddim_timesteps",
            format!("need 1 <= count <= N, got count={count}, N={n_steps}"),
        ));
    }
    let stride = n_steps / count;
    let mut ts: Vec<usize> = (1..=count).map(|i| i * stride).collect();
    *ts.last_mut().unwrap() = n_steps;
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn cosine_schedule_valid_for_reference_sizes() {
        for n in [50usize, 200] {
            let s = cosine_schedule(n).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for i in 1..=n {
                assert!(s.alpha_bar(i) > 0.0 && s.alpha_bar(i) <= 1.0);
                assert!(s.alpha_bar(i) < s.alpha_bar(i - 1), "strictly decreasing");
                assert!(s.beta(i) > 0.0 && s.beta(i) <= BETA_CLIP);
            }
        }
        assert!(cosine_schedule(0).is_err());
        assert!(cosine_schedule(1).is_ok());
    }

    #[test]
    fn alpha_bar_matches_direct_product_oracle() {
        let s = cosine_schedule(50).unwrap();
        // Independent product over the beta sequence.
        let mut prod = 1.0f64;
        for n in 1..=50 {
            prod *= 1.0 - s.beta(n);
        }
        let rel = ((s.alpha_bar(50) - prod) / prod).abs();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn q_sample_identity_cases() {
        let s = cosine_schedule(50).unwrap();
        let x0 = Array::from_vec(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let zero = Array::zeros(&[2, 2]);
        // eps = 0 -> sqrt(alpha_bar) * x0 exactly.
        let xn = q_sample(&x0, 7, &zero, &s).unwrap();
        let c = s.alpha_bar(7).sqrt() as f32;
        for (a, b) in xn.data().iter().zip(x0.data()) {
            assert_eq!(*a, c * b);
        }
        // n = 0 -> x0 unchanged.
        let eps = Array::fill(&[2, 2], 9.0);
        let x_same = q_sample(&x0, 0, &eps, &s).unwrap();
        assert!(x_same.bit_eq(&x0));
        // out of range
        assert!(q_sample(&x0, 51, &zero, &s).is_err());
    }

    #[test]
    fn q_sample_marginal_matches_composed_single_steps() {
        // Marginal at step n must match composing n single corruption steps:
        // mean sqrt(ab_n) x0, variance 1 - ab_n. Monte-Carlo over 1e5 draws
        // of the scalar case, 3 standard errors.
        let s = cosine_schedule(50).unwrap();
        let n = 20;
        let x0v = 1.5f32;
        let x0 = Array::scalar(x0v);
        let draws = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(99);

        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..draws {
            let eps = Array::randn(&[1], &mut rng);
            let v = q_sample(&x0, n, &eps, &s).unwrap().item() as f64;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let expect_mean = s.alpha_bar(n).sqrt() * x0v as f64;
        let expect_var = 1.0 - s.alpha_bar(n);
        let se_mean = (expect_var / draws as f64).sqrt();
        let se_var = expect_var * (2.0 / draws as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {expect_mean}"
        );
        assert!(
            (var - expect_var).abs() < 3.0 * se_var,
            "var {var} vs {expect_var}"
        );

        // Composing n single steps x_k = sqrt(1-beta_k) x_{k-1} + sqrt(beta_k) eps
        // gives the same two moments; check the sequential route too.
        let mut sum2 = 0.0f64;
        let mut sum2_sq = 0.0f64;
        for _ in 0..draws {
            let mut x = x0v as f64;
            for k in 1..=n {
                let eps: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                x = (1.0 - s.beta(k)).sqrt() * x + s.beta(k).sqrt() * eps;
            }
            sum2 += x;
            sum2_sq += x * x;
        }
        let mean2 = sum2 / draws as f64;
        let var2 = sum2_sq / draws as f64 - mean2 * mean2;
        assert!((mean2 - expect_mean).abs() < 3.0 * se_mean, "sequential mean");
        assert!((var2 - expect_var).abs() < 3.0 * se_var, "sequential var");
    }

    #[test]
    fn ddpm_posterior_coefficients_and_variance() {
        for n_steps in [50usize, 200] {
            let s = cosine_schedule(n_steps).unwrap();
            for n in 2..=n_steps {
                // Coefficient identity: sqrt(ab_{n-1}) beta_n + sqrt(a_n)(1-ab_{n-1})
                // approximately equals (1 - ab_n); exact as beta -> 0, checked at
                // the smallest-beta step within 1e-4 relative.
                let lhs = s.alpha_bar(n - 1).sqrt() * s.beta(n)
                    + s.alpha(n).sqrt() * (1.0 - s.alpha_bar(n - 1));
                let rhs = 1.0 - s.alpha_bar(n);
                let (_, var) = ddpm_posterior(
                    &Array::scalar(0.0),
                    &Array::scalar(0.0),
                    n,
                    &s,
                )
                .unwrap();
                assert!(var > 0.0, "sigma^2 positive at n={n}");
                assert!(var < s.beta(n), "sigma^2 < beta at n={n}");
                if n == 2 {
                    // smallest beta in the sweep for the cosine schedule
                    assert!(((lhs - rhs) / rhs).abs() < 1e-4, "n={n}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn ddpm_posterior_fixed_point_when_inputs_equal() {
        // If x0_hat = x_n, mu is a convex-like combination whose coefficients
        // sum to ~1, so mu ~= x_n; exact in the flat-schedule limit. Check the
        // deviation is at the coefficient-identity scale.
        let s = cosine_schedule(50).unwrap();
        let x = Array::fill(&[3], 2.0);
        let (mu, _) = ddpm_posterior(&x, &x, 10, &s).unwrap();
        for v in mu.data() {
            assert!((v - 2.0).abs() < 2e-3, "{v}");
        }
        assert!(ddpm_posterior(&x, &x, 1, &s).is_err());
    }

    #[test]
    fn ddim_eta_zero_ignores_noise() {
        let s = cosine_schedule(50).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x0 = Array::randn(&[4], &mut rng);
        let xn = Array::randn(&[4], &mut rng);
        let noise_a = Array::randn(&[4], &mut rng);
        let noise_b = Array::randn(&[4], &mut rng);
        let a = ddim_step(&x0, &xn, 20, 10, 0.0, &s, &noise_a).unwrap();
        let b = ddim_step(&x0, &xn, 20, 10, 0.0, &s, &noise_b).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn ddim_consecutive_eta_one_variance_equals_ddpm() {
        for n_steps in [50usize, 200] {
            let s = cosine_schedule(n_steps).unwrap();
            for n in 2..=n_steps {
                let sigma = ddim_sigma(n, n - 1, 1.0, &s);
                let (_, var) = ddpm_posterior(
                    &Array::scalar(0.0),
                    &Array::scalar(0.0),
                    n,
                    &s,
                )
                .unwrap();
                let rel = ((sigma * sigma - var) / var).abs();
                assert!(rel < 1e-5, "n={n}: ddim {} vs ddpm {var}", sigma * sigma);
            }
        }
    }

    #[test]
    fn ddim_terminal_step_returns_x0() {
        let s = cosine_schedule(50).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x0 = Array::randn(&[4], &mut rng);
        let xn = Array::randn(&[4], &mut rng);
        let noise = Array::randn(&[4], &mut rng);
        let out = ddim_step(&x0, &xn, 5, 0, 1.0, &s, &noise).unwrap();
        // alpha_bar(0) = 1 makes both the direction and noise coefficients 0.
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_timestep_plans() {
        // 10 uniformly spaced steps over N = 200 is the default plan.
        assert_eq!(
            ddim_timesteps(200, 10).unwrap(),
            vec![20, 40, 60, 80, 100, 120, 140, 160, 180, 200]
        );
        assert_eq!(ddim_timesteps(50, 10).unwrap(), vec![5, 10, 15, 20, 25, 30, 35, 40, 45, 50]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn unknown_schedule_name_is_rejected() {
        assert!(build_schedule("cosine", 10).is_ok());
        let err = build_schedule("linear", 10).unwrap_err();
        assert!(err.to_string().contains("cosine"));
    }
}
