//! Denoisers: the contract consumed by the samplers, an analytic Gaussian oracle and a
//! trainable multiscale FEM-convolution network.

mod checkpoint;
mod net;
mod oracle;
pub mod tape;
mod train;

use thiserror::Error;

use crate::fem::FemError;
use crate::field::Field;
use crate::randfield::RandFieldError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use net::{MixingMode, NetConfig, NetGeometry, ScoreNet};
pub use oracle::{gaussian_oracle_denoise, GaussianOracleDenoiser};
pub use train::{train_denoiser, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("covariance factorisation failed")]
    Factorization,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    RandField(#[from] RandFieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps a noisy field `a_t` at noise level `sigma` to an estimate of `E[A_0 | A_t = a_t]`.
pub trait Denoiser: Sync {
    fn denoise(&self, a: &Field, sigma: f64) -> Result<Field, ScoreError>;

    /// Gradient of `<upstream, denoise(a, sigma)>` with respect to `a`.
    fn vjp(&self, a: &Field, sigma: f64, upstream: &Field) -> Result<Field, ScoreError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
        (**self).denoise(a, sigma)
    }

    fn vjp(&self, a: &Field, sigma: f64, upstream: &Field) -> Result<Field, ScoreError> {
        (**self).vjp(a, sigma, upstream)
    }
}

/// Fourier features `[sin(2π ω τ); cos(2π ω τ)]` of the normalised log noise level
/// `τ = (ln σ - ln σ_min) / (ln σ_max - ln σ_min)`.
pub fn time_embedding(sigma: f64, omega: &[f64], sigma_min: f64, sigma_max: f64) -> Vec<f64> {
    let tau = normalized_log_sigma(sigma, sigma_min, sigma_max);
    let angle = |w: f64| 2.0 * std::f64::consts::PI * w * tau;
    omega
        .iter()
        .map(|&w| angle(w).sin())
        .chain(omega.iter().map(|&w| angle(w).cos()))
        .collect()
}

pub fn normalized_log_sigma(sigma: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    (sigma.ln() - sigma_min.ln()) / (sigma_max.ln() - sigma_min.ln())
}

/// `h * (1 + alpha) + beta` with per-channel `alpha`, `beta` broadcast over nodes.
pub fn film_modulate(h: &Field, alpha: &[f64], beta: &[f64]) -> Result<Field, ScoreError> {
    let c = h.channels();
    if alpha.len() != c || beta.len() != c {
        return Err(ScoreError::Shape(format!(
            "FiLM parameters have {} and {} entries for {} channels",
            alpha.len(),
            beta.len(),
            c
        )));
    }
    let mut out = h.clone();
    for row in out.values_mut().chunks_mut(c.max(1)) {
        for k in 0..c {
            row[k] = row[k] * (1.0 + alpha[k]) + beta[k];
        }
    }
    Ok(out)
}
