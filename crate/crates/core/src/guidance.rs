//! Forward operators, the data-misfit potential and two posterior samplers: gradient guidance
//! inside the Heun sampler (DPS) and decoupled annealing with Langevin refinement (DAPS).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{FemError, PoissonSystem};
use crate::field::Field;
use crate::randfield::CovarianceFactor;
use crate::score::{Denoiser, ScoreError};
use crate::sde::{heun_sample, ve_sigma_steps, Guidance, NoiseSchedule, SdeError};

/// Observation noise used when data are treated as noiseless.
pub const NOISELESS_STD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("sensor index {index} out of range for {nodes} nodes")]
    SensorOutOfRange { index: usize, nodes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid guidance configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite state at level {level}, Langevin step {step}")]
    NonFiniteState { level: usize, step: usize },
    #[error("malformed observation file: {0}")]
    Format(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A forward map from fields to observation vectors together with its adjoint.
pub trait ForwardOperator: Sync {
    fn apply(&self, a: &Field) -> Result<Vec<f64>, GuidanceError>;
    /// Adjoint of the linearisation at `a`, applied to `w`.
    fn vjp(&self, a: &Field, w: &[f64]) -> Result<Field, GuidanceError>;
    fn noise_std(&self) -> f64;
}

impl<T: ForwardOperator + ?Sized> ForwardOperator for &T {
    fn apply(&self, a: &Field) -> Result<Vec<f64>, GuidanceError> {
        (**self).apply(a)
    }
    fn vjp(&self, a: &Field, w: &[f64]) -> Result<Field, GuidanceError> {
        (**self).vjp(a, w)
    }
    fn noise_std(&self) -> f64 {
        (**self).noise_std()
    }
}

/// Point evaluation at a list of nodes, all channels, sensor-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSensors {
    nodes: usize,
    sensors: Vec<usize>,
    noise_std: f64,
}

impl SparseSensors {
    pub fn new(nodes: usize, sensors: Vec<usize>, noise_std: f64) -> Result<Self, GuidanceError> {
        if let Some(&index) = sensors.iter().find(|&&s| s >= nodes) {
            return Err(GuidanceError::SensorOutOfRange { index, nodes });
        }
        Ok(Self {
            nodes,
            sensors,
            noise_std,
        })
    }

    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }

    fn check(&self, a: &Field) -> Result<(), GuidanceError> {
        if a.nodes() != self.nodes {
            return Err(GuidanceError::Shape(format!(
                "field has {} nodes, sensors expect {}",
                a.nodes(),
                self.nodes
            )));
        }
        Ok(())
    }
}

pub fn sparse_sensor_apply(a: &Field, sensors: &[usize]) -> Result<Vec<f64>, GuidanceError> {
    let mut out = Vec::with_capacity(sensors.len() * a.channels());
    for &s in sensors {
        if s >= a.nodes() {
            return Err(GuidanceError::SensorOutOfRange { index: s, nodes: a.nodes() });
        }
        out.extend_from_slice(a.row(s));
    }
    Ok(out)
}

pub fn sparse_sensor_vjp(nodes: usize, channels: usize, sensors: &[usize], w: &[f64]) -> Result<Field, GuidanceError> {
    if w.len() != sensors.len() * channels {
        return Err(GuidanceError::Shape(format!(
            "{} observation values for {} sensors and {channels} channels",
            w.len(),
            sensors.len()
        )));
    }
    let mut out = Field::zeros(nodes, channels);
    for (k, &s) in sensors.iter().enumerate() {
        if s >= nodes {
            return Err(GuidanceError::SensorOutOfRange { index: s, nodes });
        }
        for c in 0..channels {
            let v = out.get(s, c) + w[k * channels + c];
            out.set(s, c, v);
        }
    }
    Ok(out)
}

impl ForwardOperator for SparseSensors {
    fn apply(&self, a: &Field) -> Result<Vec<f64>, GuidanceError> {
        self.check(a)?;
        sparse_sensor_apply(a, &self.sensors)
    }

    fn vjp(&self, a: &Field, w: &[f64]) -> Result<Field, GuidanceError> {
        self.check(a)?;
        sparse_sensor_vjp(self.nodes, a.channels(), &self.sensors, w)
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

/// Source-to-solution map of the Dirichlet Poisson problem, observed at every vertex.
#[derive(Clone, Debug)]
pub struct PoissonOperator {
    system: PoissonSystem,
    noise_std: f64,
}

pub fn poisson_operator(system: PoissonSystem, noise_std: f64) -> PoissonOperator {
    PoissonOperator { system, noise_std }
}

impl PoissonOperator {
    pub fn system(&self) -> &PoissonSystem {
        &self.system
    }
}

impl ForwardOperator for PoissonOperator {
    fn apply(&self, a: &Field) -> Result<Vec<f64>, GuidanceError> {
        Ok(self.system.solve(a)?.into_values())
    }

    fn vjp(&self, _a: &Field, w: &[f64]) -> Result<Field, GuidanceError> {
        Ok(self.system.vjp(&Field::scalar(w.to_vec()))?)
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

/// `Φ(a) = |L(a) - y|² / (2 σ_ξ²)`.
#[derive(Clone, Debug)]
pub struct Potential<O> {
    pub op: O,
    pub y: Vec<f64>,
}

impl<O: ForwardOperator> Potential<O> {
    pub fn new(op: O, y: Vec<f64>) -> Self {
        Self { op, y }
    }

    fn residual(&self, a: &Field) -> Result<Vec<f64>, GuidanceError> {
        let la = self.op.apply(a)?;
        if la.len() != self.y.len() {
            return Err(GuidanceError::Shape(format!(
                "operator returns {} values, observation has {}",
                la.len(),
                self.y.len()
            )));
        }
        Ok(la.iter().zip(&self.y).map(|(p, q)| p - q).collect())
    }

    pub fn value(&self, a: &Field) -> Result<f64, GuidanceError> {
        let r = self.residual(a)?;
        let s = self.op.noise_std();
        Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * s * s))
    }

    pub fn grad(&self, a: &Field) -> Result<Field, GuidanceError> {
        let s = self.op.noise_std();
        let inv = 1.0 / (s * s);
        let r: Vec<f64> = self.residual(a)?.into_iter().map(|v| v * inv).collect();
        self.op.vjp(a, &r)
    }
}

pub fn potential_grad<O: ForwardOperator>(pot: &Potential<O>, a: &Field) -> Result<Field, GuidanceError> {
    pot.grad(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// DPS guidance weight `ζ`.
    pub zeta: f64,
    pub precondition_with_c: bool,
    /// DAPS annealing levels.
    pub n_levels: usize,
    /// DAPS Langevin steps per level.
    pub langevin_steps: usize,
    /// DAPS base step size; the step at level radius `r` is `eta0 * min(1, r²)`.
    pub eta0: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            precondition_with_c: true,
            n_levels: 50,
            langevin_steps: 20,
            eta0: 1e-2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(GuidanceError::InvalidConfig(format!("zeta must be finite and >= 0, got {}", self.zeta)));
        }
        if self.n_levels == 0 {
            return Err(GuidanceError::InvalidConfig("need at least one annealing level".into()));
        }
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(GuidanceError::InvalidConfig(format!("eta0 must be finite and >= 0, got {}", self.eta0)));
        }
        Ok(())
    }
}

fn precondition(factor: &CovarianceFactor, g: Field, on: bool) -> Field {
    if on {
        factor.apply(&g).expect("gradient lives on the covariance nodes")
    } else {
        g
    }
}

struct DpsGuidance<'a, O> {
    denoiser: &'a dyn Denoiser,
    pot: &'a Potential<O>,
    factor: &'a CovarianceFactor,
    config: &'a GuidanceConfig,
}

impl<O: ForwardOperator> DpsGuidance<'_, O> {
    fn correction(&self, a: &Field, sigma: f64, hat: &Field) -> Result<Field, GuidanceError> {
        let g = self.pot.grad(hat)?;
        let g = self.denoiser.vjp(a, sigma, &g)?;
        Ok(precondition(self.factor, g, self.config.precondition_with_c).scaled(self.config.zeta * sigma))
    }
}

impl<O: ForwardOperator> Guidance for DpsGuidance<'_, O> {
    fn slope_correction(&mut self, a: &Field, sigma: f64, hat: &Field) -> Result<Field, SdeError> {
        self.correction(a, sigma, hat).map_err(|e| match e {
            GuidanceError::Score(s) => SdeError::Score(s),
            other => SdeError::Guidance(other.to_string()),
        })
    }
}

/// Heun sampling whose slope `(a - â)/σ` gains `ζ σ Ĉ ∇_a Φ(â(a))`, with the gradient taken
/// through the denoiser. With `ζ = 0` this is the unconditional sampler.
pub fn fun_dps_sample<O: ForwardOperator, R: rand::Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    factor: &CovarianceFactor,
    pot: &Potential<O>,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Field, GuidanceError> {
    config.validate()?;
    if config.zeta == 0.0 {
        return Ok(heun_sample(denoiser, schedule, factor, rng, None)?);
    }
    let mut g = DpsGuidance {
        denoiser,
        pot,
        factor,
        config,
    };
    Ok(heun_sample(denoiser, schedule, factor, rng, Some(&mut g))?)
}

/// Langevin drift `(â - â₀)/r² + Ĉ ∇Φ(â)`; the update subtracts `η` times this.
pub fn langevin_drift<O: ForwardOperator>(
    hat: &Field,
    hat0: &Field,
    r: f64,
    pot: &Potential<O>,
    factor: &CovarianceFactor,
    precondition_with_c: bool,
) -> Result<Field, GuidanceError> {
    let mut d = hat.sub(hat0).scaled(1.0 / (r * r));
    d.axpy(1.0, &precondition(factor, pot.grad(hat)?, precondition_with_c));
    Ok(d)
}

/// Annealing levels `σ_0 > … > σ_{N_A}` on the schedule's Karras grid.
pub fn daps_levels(schedule: &NoiseSchedule, n_levels: usize) -> Result<Vec<f64>, GuidanceError> {
    let s = NoiseSchedule {
        n_steps: n_levels + 1,
        ..schedule.clone()
    };
    Ok(ve_sigma_steps(&s)?)
}

/// Decoupled annealing: at each level, denoise, refine with `N` preconditioned Langevin steps
/// at radius `r = σ`, then re-noise to the next level. The denoiser is never differentiated.
pub fn fun_daps_sample<O: ForwardOperator, R: rand::Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    factor: &CovarianceFactor,
    pot: &Potential<O>,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Field, GuidanceError> {
    config.validate()?;
    let sigmas = daps_levels(schedule, config.n_levels)?;
    let mut a = factor.sample(rng, 1).scaled(sigmas[0]);
    for level in 0..config.n_levels {
        let r = sigmas[level];
        let hat0 = denoiser.denoise(&a, r)?;
        let eta = config.eta0 * (r * r).min(1.0);
        let noise_scale = (2.0 * eta).sqrt();
        let mut hat = hat0.clone();
        for step in 0..config.langevin_steps {
            let d = langevin_drift(&hat, &hat0, r, pot, factor, config.precondition_with_c)?;
            hat.axpy(-eta, &d);
            hat.axpy(noise_scale, &factor.sample(rng, hat.channels()));
            if !hat.is_finite() {
                return Err(GuidanceError::NonFiniteState { level, step });
            }
        }
        a = hat;
        a.axpy(sigmas[level + 1], &factor.sample(rng, a.channels()));
        if !a.is_finite() {
            return Err(GuidanceError::NonFiniteState {
                level,
                step: config.langevin_steps,
            });
        }
    }
    Ok(a)
}

/// Contents of an observation file.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    /// `(node, value)` pairs for a point-sensor operator.
    Sensors(Vec<(usize, f64)>),
    /// A Poisson solution stored as a Field file; relative paths resolve against the
    /// observation file's directory.
    Poisson(PathBuf),
}

impl Observation {
    pub fn parse(text: &str) -> Result<Self, GuidanceError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let head = lines.next().ok_or_else(|| GuidanceError::Format("empty file".into()))?;
        let mut words = head.split_whitespace();
        match (words.next(), words.next(), words.next()) {
            (Some("sensors"), Some(m), None) => {
                let m: usize = m
                    .parse()
                    .map_err(|_| GuidanceError::Format(format!("bad sensor count {m:?}")))?;
                let mut pairs = Vec::with_capacity(m);
                for line in lines.by_ref().take(m) {
                    let mut it = line.split_whitespace();
                    let (Some(i), Some(v), None) = (it.next(), it.next(), it.next()) else {
                        return Err(GuidanceError::Format(format!("expected `node value`, got {line:?}")));
                    };
                    let i = i
                        .parse()
                        .map_err(|_| GuidanceError::Format(format!("bad node index {i:?}")))?;
                    let v = v
                        .parse()
                        .map_err(|_| GuidanceError::Format(format!("bad value {v:?}")))?;
                    pairs.push((i, v));
                }
                if pairs.len() != m {
                    return Err(GuidanceError::Format(format!("expected {m} sensor lines, got {}", pairs.len())));
                }
                if let Some(extra) = lines.next() {
                    return Err(GuidanceError::Format(format!("unexpected line {extra:?}")));
                }
                Ok(Observation::Sensors(pairs))
            }
            (Some("poisson"), Some(path), None) => {
                if let Some(extra) = lines.next() {
                    return Err(GuidanceError::Format(format!("unexpected line {extra:?}")));
                }
                Ok(Observation::Poisson(PathBuf::from(path)))
            }
            _ => Err(GuidanceError::Format(format!(
                "first line must be `sensors M` or `poisson PATH`, got {head:?}"
            ))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            Observation::Sensors(pairs) => {
                writeln!(s, "sensors {}", pairs.len()).unwrap();
                for (i, v) in pairs {
                    writeln!(s, "{i} {v:e}").unwrap();
                }
            }
            Observation::Poisson(p) => writeln!(s, "poisson {}", p.display()).unwrap(),
        }
        s
    }

    /// Reads the file, making a relative Poisson path absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GuidanceError> {
        let path = path.as_ref();
        let obs = Self::parse(&std::fs::read_to_string(path)?)?;
        Ok(match obs {
            Observation::Poisson(p) if p.is_relative() => {
                Observation::Poisson(path.parent().unwrap_or(Path::new(".")).join(p))
            }
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GuidanceError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_poisson;
    use crate::mesh::{dual_graph, triangulate_unit_square};
    use crate::randfield::build_covariance;
    use crate::score::GaussianOracleDenoiser;
    use crate::sde::heun_sample;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn rand_field(n: usize, seed: u64) -> Field {
        let mut rng = crate::rng::seeded(seed);
        Field::scalar((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn oracle_setup() -> (CovarianceFactor, GaussianOracleDenoiser, Field) {
        let g = dual_graph(&triangulate_unit_square(3, 2).unwrap());
        let f = build_covariance(&g.positions, 0.3, 1e-6).unwrap();
        let n = f.nodes();
        let mean = Field::scalar((0..n).map(|i| 0.2 * i as f64 - 0.5).collect());
        let sigma = f.kernel() * 0.5 + DMatrix::identity(n, n) * 0.05;
        let d = GaussianOracleDenoiser::new(&mean, sigma, &f).unwrap();
        (f, d, mean)
    }

    struct Counting<'a> {
        inner: &'a GaussianOracleDenoiser,
        vjps: AtomicUsize,
    }

    impl Denoiser for Counting<'_> {
        fn denoise(&self, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
            self.inner.denoise(a, sigma)
        }
        fn vjp(&self, a: &Field, sigma: f64, u: &Field) -> Result<Field, ScoreError> {
            self.vjps.fetch_add(1, Ordering::Relaxed);
            self.inner.vjp(a, sigma, u)
        }
    }

    #[test]
    fn sensor_operator_identity_empty_and_adjoint() {
        let a = rand_field(6, 1);
        assert_eq!(sparse_sensor_apply(&a, &[0, 1, 2, 3, 4, 5]).unwrap(), a.values());
        let none = SparseSensors::new(6, vec![], 0.1).unwrap();
        assert!(none.apply(&a).unwrap().is_empty());
        let pot = Potential::new(none, vec![]);
        assert_eq!(pot.grad(&a).unwrap(), Field::zeros(6, 1));
        let op = SparseSensors::new(6, vec![4, 1, 4], 0.1).unwrap();
        let w = [0.3, -1.2, 2.0];
        let lhs: f64 = op.apply(&a).unwrap().iter().zip(&w).map(|(p, q)| p * q).sum();
        let rhs = a.dot(&op.vjp(&a, &w).unwrap());
        assert!((lhs - rhs).abs() <= 1e-15 * lhs.abs().max(1.0));
        assert!(matches!(
            SparseSensors::new(6, vec![6], 0.1),
            Err(GuidanceError::SensorOutOfRange { index: 6, nodes: 6 })
        ));
    }

    #[test]
    fn potential_gradient_zero_and_linear_in_residual() {
        let a = rand_field(6, 2);
        let op = SparseSensors::new(6, vec![0, 3, 5], 0.5).unwrap();
        let y = op.apply(&a).unwrap();
        let pot = Potential::new(op.clone(), y.clone());
        assert_eq!(pot.value(&a).unwrap(), 0.0);
        assert!(pot.grad(&a).unwrap().values().iter().all(|&v| v == 0.0));
        let y1: Vec<f64> = y.iter().map(|v| v - 0.7).collect();
        let y2: Vec<f64> = y.iter().map(|v| v - 1.4).collect();
        let g1 = Potential::new(op.clone(), y1).grad(&a).unwrap();
        let g2 = Potential::new(op, y2).grad(&a).unwrap();
        for (p, q) in g1.values().iter().zip(g2.values()) {
            assert!((2.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_potential_gradient_matches_finite_differences() {
        let mesh = triangulate_unit_square(2, 2).unwrap();
        let op = poisson_operator(assemble_poisson(&mesh).unwrap(), 0.3);
        let y = rand_field(mesh.vertices().len(), 3).into_values();
        let pot = Potential::new(op, y);
        let a = rand_field(mesh.triangles().len(), 4);
        let g = pot.grad(&a).unwrap();
        let h = 1e-6;
        for i in 0..a.nodes() {
            let mut p = a.clone();
            p.values_mut()[i] += h;
            let mut m = a.clone();
            m.values_mut()[i] -= h;
            let fd = (pot.value(&p).unwrap() - pot.value(&m).unwrap()) / (2.0 * h);
            let gi = g.values()[i];
            assert!((fd - gi).abs() <= 1e-6 * fd.abs().max(gi.abs()).max(1e-8), "{i}: {fd} vs {gi}");
        }
    }

    #[test]
    fn poisson_operator_adjoint_and_exact_data() {
        let mesh = triangulate_unit_square(4, 3).unwrap();
        let op = poisson_operator(assemble_poisson(&mesh).unwrap(), NOISELESS_STD);
        let a = rand_field(mesh.triangles().len(), 5);
        let w = rand_field(mesh.vertices().len(), 6);
        let lhs: f64 = op.apply(&a).unwrap().iter().zip(w.values()).map(|(p, q)| p * q).sum();
        let rhs = a.dot(&op.vjp(&a, w.values()).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        let pot = Potential::new(op.clone(), op.apply(&a).unwrap());
        assert_eq!(pot.value(&a).unwrap(), 0.0);
    }

    #[test]
    fn dps_reduces_to_unconditional_sampling() {
        let (f, d, _) = oracle_setup();
        let sched = NoiseSchedule::ve(30);
        let base = heun_sample(&d, &sched, &f, &mut crate::rng::seeded(7), None).unwrap();
        let op = SparseSensors::new(f.nodes(), vec![0, 2], 0.1).unwrap();
        let pot = Potential::new(op.clone(), vec![5.0, -5.0]);
        let off = GuidanceConfig {
            zeta: 0.0,
            ..GuidanceConfig::default()
        };
        let s = fun_dps_sample(&d, &sched, &f, &pot, &off, &mut crate::rng::seeded(7)).unwrap();
        assert_eq!(s, base);
        let vague = SparseSensors::new(f.nodes(), vec![0, 2], f64::INFINITY).unwrap();
        let pot = Potential::new(vague, vec![5.0, -5.0]);
        let s = fun_dps_sample(&d, &sched, &f, &pot, &GuidanceConfig::default(), &mut crate::rng::seeded(7)).unwrap();
        assert_eq!(s, base);
    }

    #[test]
    fn dps_pulls_sensor_values_toward_data() {
        let (f, d, _) = oracle_setup();
        let sched = NoiseSchedule::ve(200);
        let op = SparseSensors::new(f.nodes(), vec![3], 0.1).unwrap();
        let pot = Potential::new(op, vec![4.0]);
        let mut gap_free = 0.0;
        let mut gap_guided = 0.0;
        for k in 0..10 {
            let free = heun_sample(&d, &sched, &f, &mut crate::rng::seeded(k), None).unwrap();
            let guided =
                fun_dps_sample(&d, &sched, &f, &pot, &GuidanceConfig::default(), &mut crate::rng::seeded(k)).unwrap();
            gap_free += (free.values()[3] - 4.0).abs();
            gap_guided += (guided.values()[3] - 4.0).abs();
        }
        assert!(gap_guided < 0.5 * gap_free, "{gap_guided} vs {gap_free}");
    }

    #[test]
    fn daps_never_differentiates_the_denoiser() {
        let (f, d, _) = oracle_setup();
        let counting = Counting {
            inner: &d,
            vjps: AtomicUsize::new(0),
        };
        let op = SparseSensors::new(f.nodes(), vec![1, 4], 0.1).unwrap();
        let pot = Potential::new(op, vec![0.5, 0.5]);
        let cfg = GuidanceConfig {
            n_levels: 5,
            langevin_steps: 3,
            ..GuidanceConfig::default()
        };
        fun_daps_sample(&counting, &NoiseSchedule::default(), &f, &pot, &cfg, &mut crate::rng::seeded(1)).unwrap();
        assert_eq!(counting.vjps.load(Ordering::Relaxed), 0);
        fun_dps_sample(&counting, &NoiseSchedule::ve(5), &f, &pot, &cfg, &mut crate::rng::seeded(1)).unwrap();
        assert!(counting.vjps.load(Ordering::Relaxed) > 0);
    }

    #[test]
    fn daps_single_level_without_langevin_unrolls_by_hand() {
        let (f, d, _) = oracle_setup();
        let op = SparseSensors::new(f.nodes(), vec![1], 0.1).unwrap();
        let pot = Potential::new(op, vec![1.0]);
        let cfg = GuidanceConfig {
            n_levels: 1,
            langevin_steps: 0,
            ..GuidanceConfig::default()
        };
        let sched = NoiseSchedule::default();
        let got = fun_daps_sample(&d, &sched, &f, &pot, &cfg, &mut crate::rng::seeded(9)).unwrap();
        let mut rng = crate::rng::seeded(9);
        let a_t = f.sample(&mut rng, 1).scaled(sched.sigma_max);
        let mut want = d.denoise(&a_t, sched.sigma_max).unwrap();
        want.axpy(sched.sigma_min, &f.sample(&mut rng, 1));
        assert_eq!(got, want);
    }

    #[test]
    fn langevin_drift_vanishes_at_gaussian_posterior_mean() {
        let (f, _, _) = oracle_setup();
        let n = f.nodes();
        let sensors = vec![0, 3, 5];
        let op = SparseSensors::new(n, sensors.clone(), 0.2).unwrap();
        let y = vec![0.4, -0.3, 1.1];
        let pot = Potential::new(op, y.clone());
        let hat0 = rand_field(n, 8);
        for r in [1.0, 0.1, 0.01] {
            // posterior mean for prior N(hat0, r² K) and sensor data
            let prior = f.kernel() * (r * r);
            let s = DMatrix::from_fn(3, n, |i, j| if sensors[i] == j { 1.0 } else { 0.0 });
            let gram = &s * &prior * s.transpose() + DMatrix::identity(3, 3) * 0.04;
            let m = DVector::from_column_slice(hat0.values());
            let resid = DVector::from_column_slice(&y) - &s * &m;
            let mean = &m + &prior * s.transpose() * gram.lu().solve(&resid).unwrap();
            let mean = Field::scalar(mean.as_slice().to_vec());
            let drift = langevin_drift(&mean, &hat0, r, &pot, &f, true).unwrap();
            let scale = hat0.sub(&mean).norm() / (r * r);
            assert!(drift.norm() < 1e-6 * scale.max(1.0), "r = {r}: {}", drift.norm());
        }
    }

    #[test]
    fn observation_file_round_trip() {
        let obs = Observation::Sensors(vec![(3, 0.25), (10, -1.5e-3)]);
        assert_eq!(Observation::parse(&obs.to_text()).unwrap(), obs);
        let p = Observation::Poisson(PathBuf::from("u.fld"));
        assert_eq!(Observation::parse(&p.to_text()).unwrap(), p);
        assert!(Observation::parse("sensors 2\n1 0.5\n").is_err());
        assert!(Observation::parse("cameras 1\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.txt");
        p.save(&path).unwrap();
        assert_eq!(Observation::load(&path).unwrap(), Observation::Poisson(dir.path().join("u.fld")));
    }
}
