//! Noise schedules, forward perturbation kernels and the Heun sampler.

use thiserror::Error;

use crate::field::Field;
use crate::randfield::CovarianceFactor;
use crate::score::{Denoiser, ScoreError};

pub const SIGMA_MIN: f64 = 0.001;
pub const SIGMA_MAX: f64 = 40.0;
pub const RHO: f64 = 7.0;
pub const DEFAULT_STEPS: usize = 400;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("noise level must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("guidance failed: {0}")]
    Guidance(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Ve,
    Vp,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub kind: SdeKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    pub rho: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::ve(DEFAULT_STEPS)
    }
}

impl NoiseSchedule {
    pub fn ve(n_steps: usize) -> Self {
        Self {
            kind: SdeKind::Ve,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
            n_steps,
            rho: RHO,
            t_min: 1e-3,
            t_max: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let bad = |m: String| Err(SdeError::InvalidSchedule(m));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return bad(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if self.n_steps < 2 {
            return bad(format!("need at least 2 steps, got {}", self.n_steps));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if self.kind == SdeKind::Vp && !(self.t_min >= 0.0 && self.t_min < self.t_max) {
            return bad(format!("need 0 <= t_min < t_max, got {} and {}", self.t_min, self.t_max));
        }
        Ok(())
    }
}

/// `σ_i = (σ_max^{1/ρ} + i/(N-1) (σ_min^{1/ρ} - σ_max^{1/ρ}))^ρ` for `i = 0..N`.
pub fn ve_sigma_steps(schedule: &NoiseSchedule) -> Result<Vec<f64>, SdeError> {
    schedule.validate()?;
    let n = schedule.n_steps;
    let inv = 1.0 / schedule.rho;
    let (hi, lo) = (schedule.sigma_max.powf(inv), schedule.sigma_min.powf(inv));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(schedule.rho))
        .collect();
    out[0] = schedule.sigma_max;
    out[n - 1] = schedule.sigma_min;
    Ok(out)
}

/// `a0 + σ ξ` with `ξ ~ N(0, C)` drawn per channel.
pub fn ve_perturb<R: rand::Rng + ?Sized>(
    a0: &Field,
    sigma: f64,
    factor: &CovarianceFactor,
    rng: &mut R,
) -> Result<Field, SdeError> {
    if !(sigma >= 0.0) {
        return Err(SdeError::InvalidSigma(sigma));
    }
    check_nodes(a0, factor)?;
    let mut out = a0.clone();
    if sigma > 0.0 {
        out.axpy(sigma, &factor.sample(rng, a0.channels()));
    }
    Ok(out)
}

/// `e^{-t/2} a0 + sqrt(1 - e^{-t}) ξ` with `ξ ~ N(0, C)`.
pub fn vp_perturb<R: rand::Rng + ?Sized>(
    a0: &Field,
    t: f64,
    factor: &CovarianceFactor,
    rng: &mut R,
) -> Result<Field, SdeError> {
    if !(t >= 0.0) {
        return Err(SdeError::InvalidSigma(t));
    }
    check_nodes(a0, factor)?;
    let (mean, std) = vp_coefficients(t);
    let mut out = a0.scaled(mean);
    if t > 0.0 {
        out.axpy(std, &factor.sample(rng, a0.channels()));
    }
    Ok(out)
}

/// Mean factor and standard deviation of the VP transition at time `t`.
pub fn vp_coefficients(t: f64) -> (f64, f64) {
    ((-0.5 * t).exp(), (-(-t).exp_m1()).sqrt())
}

fn check_nodes(a: &Field, factor: &CovarianceFactor) -> Result<(), SdeError> {
    if a.nodes() != factor.nodes() {
        return Err(SdeError::Shape(format!(
            "field has {} nodes, covariance has {}",
            a.nodes(),
            factor.nodes()
        )));
    }
    Ok(())
}

/// The C-absorbed score `-(a - â0) / σ²`.
pub fn score_from_denoiser(a: &Field, sigma: f64, a0_hat: &Field) -> Result<Field, SdeError> {
    if !(sigma > 0.0) {
        return Err(SdeError::InvalidSigma(sigma));
    }
    if !a.same_shape(a0_hat) {
        return Err(SdeError::Shape("score inputs differ in shape".into()));
    }
    Ok(a0_hat.sub(a).scaled(1.0 / (sigma * sigma)))
}

/// A correction added to the probability-flow slope `(a - â0) / σ` at every evaluation.
pub trait Guidance {
    fn slope_correction(&mut self, a: &Field, sigma: f64, a0_hat: &Field) -> Result<Field, SdeError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeunOptions {
    /// Stochastic churn `S_churn`; 0 gives the deterministic probability flow.
    pub churn: f64,
    /// Return the final denoiser estimate instead of the state at `σ_min`.
    pub return_tweedie: bool,
}

impl Default for HeunOptions {
    fn default() -> Self {
        Self {
            churn: 0.0,
            return_tweedie: false,
        }
    }
}

pub fn heun_sample<R: rand::Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    factor: &CovarianceFactor,
    rng: &mut R,
    guidance: Option<&mut dyn Guidance>,
) -> Result<Field, SdeError> {
    let initial = factor.sample(rng, 1).scaled(schedule.sigma_max);
    heun_sample_from(initial, denoiser, schedule, factor, rng, guidance, HeunOptions::default())
}

/// Karras-Heun integration from `initial` at `σ_max` down to `σ_min`; the last step is Euler.
pub fn heun_sample_from<R: rand::Rng + ?Sized>(
    initial: Field,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    factor: &CovarianceFactor,
    rng: &mut R,
    mut guidance: Option<&mut dyn Guidance>,
    options: HeunOptions,
) -> Result<Field, SdeError> {
    if schedule.kind != SdeKind::Ve {
        return Err(SdeError::InvalidSchedule("the Heun sampler integrates the VE flow".into()));
    }
    let sigmas = ve_sigma_steps(schedule)?;
    check_nodes(&initial, factor)?;
    let steps = sigmas.len() - 1;
    let slope = |a: &Field, sigma: f64, g: &mut Option<&mut dyn Guidance>| -> Result<Field, SdeError> {
        let hat = denoiser.denoise(a, sigma)?;
        let mut d = a.sub(&hat).scaled(1.0 / sigma);
        if let Some(g) = g.as_deref_mut() {
            d.axpy(1.0, &g.slope_correction(a, sigma, &hat)?);
        }
        Ok(d)
    };
    let gamma_max = std::f64::consts::SQRT_2 - 1.0;
    let mut a = initial;
    for i in 0..steps {
        let (cur, next) = (sigmas[i], sigmas[i + 1]);
        let mut s = cur;
        if options.churn > 0.0 {
            let gamma = (options.churn / steps as f64).min(gamma_max);
            s = cur * (1.0 + gamma);
            a.axpy((s * s - cur * cur).sqrt(), &factor.sample(rng, a.channels()));
        }
        let d = slope(&a, s, &mut guidance)?;
        let h = next - s;
        let mut pred = a.clone();
        pred.axpy(h, &d);
        if i + 1 < steps {
            let d2 = slope(&pred, next, &mut guidance)?;
            pred = a.clone();
            pred.axpy(0.5 * h, &d);
            pred.axpy(0.5 * h, &d2);
        }
        if !pred.is_finite() {
            return Err(SdeError::NonFiniteState { step: i });
        }
        a = pred;
    }
    if options.return_tweedie {
        return Ok(denoiser.denoise(&a, schedule.sigma_min)?);
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randfield::build_covariance;
    use crate::score::GaussianOracleDenoiser;
    use nalgebra::{DMatrix, DVector};

    struct Zero;

    impl Denoiser for Zero {
        fn denoise(&self, a: &Field, _: f64) -> Result<Field, ScoreError> {
            Ok(Field::zeros(a.nodes(), a.channels()))
        }
        fn vjp(&self, a: &Field, _: f64, _: &Field) -> Result<Field, ScoreError> {
            Ok(Field::zeros(a.nodes(), a.channels()))
        }
    }

    fn points(n: usize) -> Vec<crate::mesh::Point> {
        (0..n).map(|k| [(k % 4) as f64 * 0.07, (k / 4) as f64 * 0.05]).collect()
    }

    #[test]
    fn karras_endpoints_and_linear_case() {
        let s = ve_sigma_steps(&NoiseSchedule::ve(400)).unwrap();
        assert_eq!((s[0], s[399]), (40.0, 0.001));
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        let mut lin = NoiseSchedule::ve(3);
        lin.rho = 1.0;
        let s = ve_sigma_steps(&lin).unwrap();
        assert_eq!(s[0], 40.0);
        assert!((s[1] - 20.0005).abs() < 1e-12);
        assert_eq!(s[2], 0.001);
    }

    #[test]
    fn karras_matches_independent_formula() {
        let s = ve_sigma_steps(&NoiseSchedule::ve(400)).unwrap();
        for (i, v) in s.iter().enumerate().skip(1).take(398) {
            // interpolate in sigma^(1/7) space
            let t = i as f64 / 399.0;
            let root = (1.0 - t) * 40f64.powf(1.0 / 7.0) + t * 0.001f64.powf(1.0 / 7.0);
            let want = root.powi(7);
            assert!((v - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn invalid_schedules() {
        let mut s = NoiseSchedule::ve(1);
        assert!(s.validate().is_err());
        s.n_steps = 10;
        s.sigma_min = 50.0;
        assert!(ve_sigma_steps(&s).is_err());
    }

    #[test]
    fn perturbation_edge_cases() {
        let f = build_covariance(&points(6), 0.1, 1e-6).unwrap();
        let a0 = Field::scalar(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = crate::rng::seeded(1);
        assert_eq!(ve_perturb(&a0, 0.0, &f, &mut rng).unwrap(), a0);
        assert_eq!(vp_perturb(&a0, 0.0, &f, &mut rng).unwrap(), a0);
        let zero = Field::zeros(6, 1);
        let draw = ve_perturb(&zero, 1.0, &f, &mut crate::rng::seeded(2)).unwrap();
        assert_eq!(draw, f.sample(&mut crate::rng::seeded(2), 1));
        let (m, s) = vp_coefficients(std::f64::consts::LN_2);
        assert!((s * s - 0.5).abs() < 1e-15 && (m * m - 0.5).abs() < 1e-15);
        assert!(vp_coefficients(50.0).0 < 2e-11);
        assert!(ve_perturb(&a0, -1.0, &f, &mut rng).is_err());
    }

    fn empirical_cov(draws: &[Field]) -> DMatrix<f64> {
        let n = draws[0].nodes();
        let mut c = DMatrix::zeros(n, n);
        for d in draws {
            let v = DVector::from_column_slice(d.values());
            c += &v * v.transpose();
        }
        c / draws.len() as f64
    }

    #[test]
    fn perturbation_covariance_and_composition() {
        let f = build_covariance(&points(8), 0.1, 1e-6).unwrap();
        let a0 = Field::scalar(vec![0.5; 8]);
        let mut rng = crate::rng::seeded(3);
        let draws: Vec<Field> = (0..10_000)
            .map(|_| ve_perturb(&a0, 2.0, &f, &mut rng).unwrap().sub(&a0))
            .collect();
        let want = f.kernel() * 4.0;
        assert!((empirical_cov(&draws) - &want).norm() / want.norm() < 0.1);
        // σ1 = 1 followed by sqrt(4 - 1) has the law of σ2 = 2
        let composed: Vec<Field> = (0..10_000)
            .map(|_| {
                let a = ve_perturb(&a0, 1.0, &f, &mut rng).unwrap();
                ve_perturb(&a, 3f64.sqrt(), &f, &mut rng).unwrap().sub(&a0)
            })
            .collect();
        assert!((empirical_cov(&composed) - &want).norm() / want.norm() < 0.1);
    }

    #[test]
    fn score_conversion() {
        let a = Field::scalar(vec![1.0, -2.0]);
        let s = score_from_denoiser(&a, 0.5, &a).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        let v = Field::scalar(vec![3.0, 1.0]);
        let hat = a.sub(&v.scaled(0.25));
        let s = score_from_denoiser(&a, 0.5, &hat).unwrap();
        for (x, y) in s.values().iter().zip(v.values()) {
            assert!((x + y).abs() < 1e-14);
        }
        assert!(score_from_denoiser(&a, 0.0, &a).is_err());
    }

    #[test]
    fn zero_denoiser_contracts_noise() {
        let f = build_covariance(&points(5), 0.1, 1e-6).unwrap();
        let init = f.sample(&mut crate::rng::seeded(4), 1).scaled(40.0);
        let out = heun_sample_from(
            init.clone(),
            &Zero,
            &NoiseSchedule::ve(50),
            &f,
            &mut crate::rng::seeded(0),
            None,
            HeunOptions::default(),
        )
        .unwrap();
        for (o, i) in out.values().iter().zip(init.values()) {
            assert!((o - i * 0.001 / 40.0).abs() <= 1e-14 * i.abs().max(1.0));
        }
    }

    #[test]
    fn hand_unrolled_three_level_schedule() {
        // one node, N(m, s2) prior, K = 1: the denoiser is m + s2 / (s2 + σ²) (a - m)
        let (m, s2) = (0.7, 2.0);
        let f = build_covariance(&[[0.0, 0.0]], 0.1, 0.0).unwrap();
        let d = GaussianOracleDenoiser::with_kernel(
            &Field::scalar(vec![m]),
            DMatrix::from_element(1, 1, s2),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let sched = NoiseSchedule::ve(3);
        let sig = ve_sigma_steps(&sched).unwrap();
        let den = |a: f64, s: f64| m + s2 / (s2 + s * s) * (a - m);
        let slope = |a: f64, s: f64| (a - den(a, s)) / s;
        let a0 = 13.0;
        let h = sig[1] - sig[0];
        let d1 = slope(a0, sig[0]);
        let pred = a0 + h * d1;
        let a1 = a0 + 0.5 * h * (d1 + slope(pred, sig[1]));
        let a2 = a1 + (sig[2] - sig[1]) * slope(a1, sig[1]);
        let out = heun_sample_from(
            Field::scalar(vec![a0]),
            &d,
            &sched,
            &f,
            &mut crate::rng::seeded(0),
            None,
            HeunOptions::default(),
        )
        .unwrap();
        assert!((out.values()[0] - a2).abs() <= 1e-14 * a2.abs().max(1.0));
    }

    fn oracle(n: usize) -> (CovarianceFactor, GaussianOracleDenoiser) {
        let pts = points(n);
        let f = build_covariance(&pts, 0.1, 1e-6).unwrap();
        let mut sigma = crate::randfield::kernel_matrix(&pts, 0.3) * 0.5;
        for i in 0..n {
            sigma[(i, i)] += 0.05;
        }
        let mean = Field::scalar((0..n).map(|i| (i as f64 * 0.7).sin()).collect());
        let d = GaussianOracleDenoiser::new(&mean, sigma, &f).unwrap();
        (f, d)
    }

    #[test]
    fn discretisation_bias_shrinks_quadratically() {
        // the flow is affine, so running it from 0 isolates the mean map
        let (f, d) = oracle(8);
        let run = |n: usize| {
            heun_sample_from(
                Field::zeros(8, 1),
                &d,
                &NoiseSchedule::ve(n),
                &f,
                &mut crate::rng::seeded(0),
                None,
                HeunOptions::default(),
            )
            .unwrap()
        };
        let reference = run(3200);
        let errs: Vec<f64> = [25, 50, 100].iter().map(|&n| run(n).sub(&reference).norm()).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= 0.5 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn deterministic_and_churn_reproducible() {
        let (f, d) = oracle(6);
        let run = |churn: f64| {
            let mut rng = crate::rng::seeded(9);
            let init = f.sample(&mut rng, 1).scaled(40.0);
            heun_sample_from(init, &d, &NoiseSchedule::ve(30), &f, &mut rng, None, HeunOptions { churn, return_tweedie: false })
                .unwrap()
        };
        assert_eq!(run(0.0), run(0.0));
        assert_eq!(run(5.0), run(5.0));
        assert_ne!(run(0.0), run(5.0));
        let a = heun_sample(&d, &NoiseSchedule::ve(20), &f, &mut crate::rng::seeded(1), None).unwrap();
        let b = heun_sample(&d, &NoiseSchedule::ve(20), &f, &mut crate::rng::seeded(1), None).unwrap();
        assert_eq!(a, b);
    }

    struct Explode;

    impl Guidance for Explode {
        fn slope_correction(&mut self, a: &Field, _: f64, _: &Field) -> Result<Field, SdeError> {
            Ok(Field::constant(a.nodes(), 1, f64::INFINITY))
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let (f, d) = oracle(4);
        let r = heun_sample(&d, &NoiseSchedule::ve(10), &f, &mut crate::rng::seeded(1), Some(&mut Explode));
        assert!(matches!(r, Err(SdeError::NonFiniteState { step: 0 })));
    }
}
