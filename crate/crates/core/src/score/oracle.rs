use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use super::{Denoiser, ScoreError};
use crate::field::Field;
use crate::randfield::{cholesky_with_jitter, CovarianceFactor};

const CACHE_LIMIT: usize = 4096;

/// Exact denoiser for Gaussian data `A_0 ~ N(m, Σ)` under noise `σ² K`:
/// `E[A_0 | a] = m + Σ (Σ + σ² K)^{-1} (a - m)`.
#[derive(Debug)]
pub struct GaussianOracleDenoiser {
    mean: Vec<f64>,
    prior_cov: DMatrix<f64>,
    kernel: DMatrix<f64>,
    degenerate: bool,
    cache: Mutex<HashMap<u64, Arc<DMatrix<f64>>>>,
}

impl Clone for GaussianOracleDenoiser {
    fn clone(&self) -> Self {
        Self {
            mean: self.mean.clone(),
            prior_cov: self.prior_cov.clone(),
            kernel: self.kernel.clone(),
            degenerate: self.degenerate,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl GaussianOracleDenoiser {
    pub fn new(mean: &Field, prior_cov: DMatrix<f64>, factor: &CovarianceFactor) -> Result<Self, ScoreError> {
        Self::with_kernel(mean, prior_cov, factor.kernel().clone())
    }

    pub fn with_kernel(mean: &Field, prior_cov: DMatrix<f64>, kernel: DMatrix<f64>) -> Result<Self, ScoreError> {
        let n = mean.nodes();
        if mean.channels() != 1 {
            return Err(ScoreError::Shape("oracle mean must have one channel".into()));
        }
        if prior_cov.shape() != (n, n) || kernel.shape() != (n, n) {
            return Err(ScoreError::Shape(format!(
                "covariances must be {n}x{n}, got {:?} and {:?}",
                prior_cov.shape(),
                kernel.shape()
            )));
        }
        if (&prior_cov - prior_cov.transpose()).amax() > 1e-12 * prior_cov.amax().max(1.0) {
            return Err(ScoreError::InvalidConfig("prior covariance is not symmetric".into()));
        }
        let degenerate = prior_cov.iter().all(|&v| v == 0.0);
        Ok(Self {
            mean: mean.values().to_vec(),
            prior_cov,
            kernel,
            degenerate,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn mean(&self) -> Field {
        Field::scalar(self.mean.clone())
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    fn factor(&self, sigma: f64) -> Result<Arc<DMatrix<f64>>, ScoreError> {
        let key = sigma.to_bits();
        if let Some(l) = self.cache.lock().unwrap().get(&key) {
            return Ok(l.clone());
        }
        let m = &self.prior_cov + &self.kernel * (sigma * sigma);
        let (l, _) = cholesky_with_jitter(&m, 0.0).map_err(|_| ScoreError::Factorization)?;
        let l = Arc::new(l);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, l.clone());
        Ok(l)
    }

    /// `(Σ + σ² K)^{-1} v`.
    fn solve(&self, sigma: f64, v: DVector<f64>) -> Result<DVector<f64>, ScoreError> {
        let l = self.factor(sigma)?;
        let y = l.solve_lower_triangular(&v).ok_or(ScoreError::Factorization)?;
        l.tr_solve_lower_triangular(&y).ok_or(ScoreError::Factorization)
    }

    fn check(&self, a: &Field, sigma: f64) -> Result<(), ScoreError> {
        if a.nodes() != self.mean.len() || a.channels() != 1 {
            return Err(ScoreError::Shape(format!(
                "oracle expects {}x1, got {}x{}",
                self.mean.len(),
                a.nodes(),
                a.channels()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(ScoreError::InvalidConfig(format!("negative noise level {sigma}")));
        }
        Ok(())
    }
}

impl Denoiser for GaussianOracleDenoiser {
    fn denoise(&self, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
        self.check(a, sigma)?;
        if self.degenerate {
            return Ok(self.mean());
        }
        if sigma == 0.0 {
            return Ok(a.clone());
        }
        let r = DVector::from_iterator(a.nodes(), a.values().iter().zip(&self.mean).map(|(x, m)| x - m));
        let out = &self.prior_cov * self.solve(sigma, r)?;
        Ok(Field::scalar(out.iter().zip(&self.mean).map(|(v, m)| v + m).collect()))
    }

    fn vjp(&self, a: &Field, sigma: f64, upstream: &Field) -> Result<Field, ScoreError> {
        self.check(a, sigma)?;
        self.check(upstream, sigma)?;
        if self.degenerate {
            return Ok(Field::zeros(a.nodes(), 1));
        }
        if sigma == 0.0 {
            return Ok(upstream.clone());
        }
        let u = DVector::from_column_slice(upstream.values());
        let out = self.solve(sigma, &self.prior_cov * u)?;
        Ok(Field::scalar(out.as_slice().to_vec()))
    }
}

pub fn gaussian_oracle_denoise(model: &GaussianOracleDenoiser, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
    model.denoise(a, sigma)
}
