use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NetGeometry, ScoreError, ScoreNet};
use crate::field::Field;
use crate::randfield::CovarianceFactor;
use crate::sde::{SIGMA_MAX, SIGMA_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    /// Evaluate batch members on the rayon pool. Gradients are still summed in batch
    /// order, so results do not depend on the thread count.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 1000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let ok = self.batch_size > 0
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.sigma_min > 0.0
            && self.sigma_min <= self.sigma_max;
        if ok {
            Ok(())
        } else {
            Err(ScoreError::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Minimises `E |net(a0 + σ ξ, σ) - a0|^2` with `ξ ~ N(0, C)` and `ln σ` uniform, using Adam.
pub fn train_denoiser(
    net: &mut ScoreNet,
    geom: &NetGeometry,
    dataset: &[Field],
    factor: &CovarianceFactor,
    config: &TrainConfig,
) -> Result<TrainReport, ScoreError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ScoreError::InvalidConfig("empty training set".into()));
    }
    let channels = net.config().channels;
    let mut rng = crate::rng::stream(config.seed, "train", 0);
    let mut m: Vec<Vec<f64>> = net.params().iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut v = m.clone();
    let (ln_lo, ln_hi) = (config.sigma_min.ln(), config.sigma_max.ln());
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch: Vec<(usize, f64, Field)> = (0..config.batch_size)
            .map(|_| {
                let k = rng.random_range(0..dataset.len());
                let sigma = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp();
                let noise = factor.sample(&mut rng, channels);
                (k, sigma, noise)
            })
            .collect();
        let eval = |(k, sigma, noise): &(usize, f64, Field)| {
            let mut a = dataset[*k].clone();
            a.axpy(*sigma, noise);
            net.loss_and_grad(geom, &a, *sigma, &dataset[*k])
        };
        let results: Vec<Result<(f64, Vec<Vec<f64>>), ScoreError>> = if config.parallel {
            batch.par_iter().map(eval).collect()
        } else {
            batch.iter().map(eval).collect()
        };
        let scale = 1.0 / config.batch_size as f64;
        let mut loss = 0.0;
        let mut grad: Vec<Vec<f64>> = m.iter().map(|x| vec![0.0; x.len()]).collect();
        for r in results {
            let (l, g) = r?;
            loss += scale * l;
            for (acc, gi) in grad.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += scale * b;
                }
            }
        }
        if !loss.is_finite() {
            return Err(ScoreError::NonFiniteLoss { iteration: it });
        }
        losses.push(loss);
        let t = (it + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for ((p, g), (mi, vi)) in net
            .params_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            for k in 0..g.len() {
                mi[k] = config.beta1 * mi[k] + (1.0 - config.beta1) * g[k];
                vi[k] = config.beta2 * vi[k] + (1.0 - config.beta2) * g[k] * g[k];
                let step = config.learning_rate * (mi[k] / c1) / ((vi[k] / c2).sqrt() + config.epsilon);
                p.data[k] -= step;
            }
        }
    }
    Ok(TrainReport { losses })
}
