//! Gaussian random fields with RBF covariance, discretised pointwise at the nodes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::field::Field;
use crate::mesh::Point;
use crate::rng::standard_normal_vec;

pub const DEFAULT_LENGTH_SCALE: f64 = 0.1;
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Number of jitter doublings tried before giving up.
pub const JITTER_DOUBLINGS: usize = 8;

#[derive(Debug, Error)]
pub enum RandFieldError {
    #[error("length scale must be positive, got {0}")]
    InvalidLengthScale(f64),
    #[error("jitter must be non-negative, got {0}")]
    InvalidJitter(f64),
    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("expected {expected} nodes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

pub fn rbf_kernel(x: Point, y: Point, length_scale: f64) -> f64 {
    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

pub fn kernel_matrix(positions: &[Point], length_scale: f64) -> DMatrix<f64> {
    let n = positions.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = rbf_kernel(positions[i], positions[j], length_scale);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Lower Cholesky factor of `m + jitter I`, doubling the jitter on failure.
///
/// A zero starting jitter is tried as is and then escalated from 1e-12 times the mean
/// diagonal. Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<(DMatrix<f64>, f64), RandFieldError> {
    if !(jitter >= 0.0) {
        return Err(RandFieldError::InvalidJitter(jitter));
    }
    let n = m.nrows();
    let mut j = jitter;
    for attempt in 0..=JITTER_DOUBLINGS {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += j;
        }
        if let Some(ch) = a.cholesky() {
            return Ok((ch.unpack(), j));
        }
        if attempt == JITTER_DOUBLINGS {
            break;
        }
        j = if j > 0.0 {
            2.0 * j
        } else {
            1e-12 * (m.trace() / n.max(1) as f64).abs().max(1e-300)
        };
    }
    Err(RandFieldError::NotPositiveDefinite { jitter: j })
}

/// The covariance operator `C` as a kernel matrix plus its jittered Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovarianceFactor {
    length_scale: f64,
    kernel: DMatrix<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
}

pub fn build_covariance(
    positions: &[Point],
    length_scale: f64,
    jitter: f64,
) -> Result<CovarianceFactor, RandFieldError> {
    if !(length_scale > 0.0 && length_scale.is_finite()) {
        return Err(RandFieldError::InvalidLengthScale(length_scale));
    }
    let kernel = kernel_matrix(positions, length_scale);
    let (chol, jitter) = cholesky_with_jitter(&kernel, jitter)?;
    Ok(CovarianceFactor {
        length_scale,
        kernel,
        chol,
        jitter,
    })
}

fn map_channels(v: &Field, f: impl Fn(DVector<f64>) -> DVector<f64>) -> Field {
    let (n, c) = (v.nodes(), v.channels());
    let mut out = Field::zeros(n, c);
    for ch in 0..c {
        let col = f(DVector::from_iterator(n, (0..n).map(|i| v.get(i, ch))));
        for i in 0..n {
            out.set(i, ch, col[i]);
        }
    }
    out
}

impl CovarianceFactor {
    pub fn nodes(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Jitter actually used by the factorisation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn check(&self, v: &Field) -> Result<(), RandFieldError> {
        if v.nodes() != self.nodes() {
            return Err(RandFieldError::LengthMismatch {
                expected: self.nodes(),
                got: v.nodes(),
            });
        }
        Ok(())
    }

    /// `L z` applied channel by channel.
    pub fn correlate(&self, z: &Field) -> Result<Field, RandFieldError> {
        self.check(z)?;
        Ok(map_channels(z, |c| &self.chol * c))
    }

    /// Solves `L w = v` channel by channel.
    pub fn whiten(&self, v: &Field) -> Result<Field, RandFieldError> {
        self.check(v)?;
        Ok(map_channels(v, |c| {
            self.chol
                .solve_lower_triangular(&c)
                .expect("Cholesky factor has a positive diagonal")
        }))
    }

    /// `K v` with the jitter excluded.
    pub fn apply(&self, v: &Field) -> Result<Field, RandFieldError> {
        self.check(v)?;
        Ok(map_channels(v, |c| &self.kernel * c))
    }

    /// One draw from `N(0, C)` per channel; normals are consumed channel by channel.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, channels: usize) -> Field {
        let n = self.nodes();
        let mut z = Field::zeros(n, channels);
        for ch in 0..channels {
            for (i, v) in standard_normal_vec(rng, n).into_iter().enumerate() {
                z.set(i, ch, v);
            }
        }
        self.correlate(&z).expect("shape is consistent")
    }
}

pub fn sample_grf<R: rand::Rng + ?Sized>(factor: &CovarianceFactor, count: usize, rng: &mut R) -> Vec<Field> {
    (0..count).map(|_| factor.sample(rng, 1)).collect()
}

#[allow(non_snake_case)]
pub fn apply_C(factor: &CovarianceFactor, v: &Field) -> Result<Field, RandFieldError> {
    factor.apply(v)
}
