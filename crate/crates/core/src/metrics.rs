//! Ensemble metrics on stacked node values: posterior-mean RMSE, energy score and unbiased MMD.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::Field;

pub const DEFAULT_MMD_LENGTH_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty ensemble")]
    Empty,
    #[error("need at least 2 fields per set, got {0}")]
    SetTooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `samples[i]` holds the `K` draws for observation `i`, whose truth is `truths[i]`.
#[derive(Clone, Debug)]
pub struct SampleEnsemble {
    samples: Vec<Vec<Field>>,
    truths: Vec<Field>,
}

impl SampleEnsemble {
    pub fn new(samples: Vec<Vec<Field>>, truths: Vec<Field>) -> Result<Self, MetricsError> {
        if truths.is_empty() || samples.is_empty() {
            return Err(MetricsError::Empty);
        }
        if samples.len() != truths.len() {
            return Err(MetricsError::Shape(format!(
                "{} sample sets for {} truths",
                samples.len(),
                truths.len()
            )));
        }
        let k = samples[0].len();
        if k == 0 {
            return Err(MetricsError::Empty);
        }
        let t0 = &truths[0];
        for (i, (set, t)) in samples.iter().zip(&truths).enumerate() {
            if set.len() != k {
                return Err(MetricsError::Shape(format!("observation {i} has {} samples, expected {k}", set.len())));
            }
            if !t.same_shape(t0) || set.iter().any(|s| !s.same_shape(t0)) {
                return Err(MetricsError::Shape(format!("observation {i} has inconsistent field shapes")));
            }
        }
        Ok(Self { samples, truths })
    }

    pub fn observations(&self) -> usize {
        self.truths.len()
    }

    pub fn samples_per_observation(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<Field>] {
        &self.samples
    }

    pub fn truths(&self) -> &[Field] {
        &self.truths
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_field(set: &[Field]) -> Vec<f64> {
    let mut m = vec![0.0; set[0].values().len()];
    for f in set {
        for (a, v) in m.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let k = set.len() as f64;
    m.iter_mut().for_each(|v| *v /= k);
    m
}

/// `‖a_i - mean_k â_i^(k)‖` for each observation.
pub fn posterior_mean_errors(ens: &SampleEnsemble) -> Vec<f64> {
    ens.samples
        .par_iter()
        .zip(&ens.truths)
        .map(|(set, t)| dist(&mean_field(set), t.values()))
        .collect()
}

pub fn rmse_posterior_mean(ens: &SampleEnsemble) -> f64 {
    let e = posterior_mean_errors(ens);
    (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
}

/// Energy score (β = 1) of each observation's ensemble.
pub fn energy_scores(ens: &SampleEnsemble) -> Vec<f64> {
    ens.samples
        .par_iter()
        .zip(&ens.truths)
        .map(|(set, t)| {
            let k = set.len() as f64;
            let fit: f64 = set.iter().map(|s| dist(s.values(), t.values())).sum::<f64>() / k;
            let mut spread = 0.0;
            for a in set {
                for b in set {
                    spread += dist(a.values(), b.values());
                }
            }
            fit - spread / (2.0 * k * k)
        })
        .collect()
}

pub fn energy_score(ens: &SampleEnsemble) -> f64 {
    let es = energy_scores(ens);
    es.iter().sum::<f64>() / es.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    /// Unbiased estimate of MMD², possibly negative.
    pub mmd2: f64,
    /// `sign(mmd2) · sqrt(|mmd2|)`.
    pub signed_root: f64,
}

pub fn gaussian_kernel(x: &[f64], z: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

pub fn mmd_unbiased(x: &[Field], z: &[Field], length_scale: f64) -> Result<Mmd, MetricsError> {
    for set in [x, z] {
        if set.len() < 2 {
            return Err(MetricsError::SetTooSmall(set.len()));
        }
    }
    if x.iter().chain(z).any(|f| !f.same_shape(&x[0])) {
        return Err(MetricsError::Shape("MMD sets have inconsistent field shapes".into()));
    }
    let within = |s: &[Field]| -> f64 {
        let n = s.len();
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| gaussian_kernel(s[i].values(), s[j].values(), length_scale))
                    .sum::<f64>()
            })
            .sum();
        total / (n * (n - 1)) as f64
    };
    let cross: f64 = x
        .par_iter()
        .map(|a| z.iter().map(|b| gaussian_kernel(a.values(), b.values(), length_scale)).sum::<f64>())
        .sum::<f64>()
        / (x.len() * z.len()) as f64;
    let mmd2 = within(x) + within(z) - 2.0 * cross;
    Ok(Mmd {
        mmd2,
        signed_root: mmd2.signum() * mmd2.abs().sqrt(),
    })
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub config: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_report<W: Write>(records: &[MetricRecord], mut w: W) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_report(text: &str) -> Result<Vec<MetricRecord>, MetricsError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
