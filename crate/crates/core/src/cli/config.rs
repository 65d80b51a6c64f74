//! Sectioned `key = value` run configuration.
//!
//! ```text
//! seed = 0
//! out = runs/demo
//!
//! [mesh]
//! nx = 8
//! shape = l_shape
//! ```
//!
//! Keys before the first header are top-level. `#` starts a comment. Unknown sections or
//! keys and unparsable values are errors, and every offending key is reported at once.
//! Precedence, lowest first: built-in defaults, the file, `--set section.key=value`, then
//! the dedicated `--seed` and `--out` flags.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BlobParams;
use crate::guidance::{GuidanceConfig, NOISELESS_STD};
use crate::mesh::DomainShape;
use crate::metrics::DEFAULT_MMD_LENGTH_SCALE;
use crate::randfield::{DEFAULT_JITTER, DEFAULT_LENGTH_SCALE};
use crate::score::{MixingMode, NetConfig, TrainConfig};
use crate::sde::{NoiseSchedule, DEFAULT_STEPS, RHO, SIGMA_MAX, SIGMA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dps,
    Daps,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse {s:?} as {}", stringify!($t)))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("cannot parse {s:?} as a number"))
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for DomainShape {
    fn parse_value(s: &str) -> Result<Self, String> {
        DomainShape::from_str(s)
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for MixingMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(MixingMode::Dense),
            "vector" => Ok(MixingMode::Vector),
            _ => Err(format!("unknown mixing mode {s:?}, expected dense or vector")),
        }
    }
    fn show(&self) -> String {
        match self {
            MixingMode::Dense => "dense".into(),
            MixingMode::Vector => "vector".into(),
        }
    }
}

impl ConfigValue for Method {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "dps" => Ok(Method::Dps),
            "daps" => Ok(Method::Daps),
            _ => Err(format!("unknown method {s:?}, expected dps or daps")),
        }
    }
    fn show(&self) -> String {
        match self {
            Method::Dps => "dps".into(),
            Method::Daps => "daps".into(),
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::parse_value(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSection {
    pub nx: usize,
    pub ny: usize,
    pub shape: DomainShape,
    pub levels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSection {
    pub length_scale: f64,
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: usize,
    pub convs_per_level: usize,
    pub patch: usize,
    pub mu: f64,
    pub time_dim: usize,
    pub omega_scale: f64,
    pub mixing: MixingMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSection {
    pub method: Method,
    pub zeta: f64,
    pub precondition_with_c: bool,
    pub n_levels: usize,
    pub langevin_steps: usize,
    pub eta0: f64,
    pub noise_std: f64,
    pub chains: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub count: usize,
    pub train_fraction: f64,
    pub max_inclusions: usize,
    pub background: f64,
    pub min_conductivity: f64,
    pub semi_axis_min: f64,
    pub semi_axis_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub containment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSection {
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub mmd_length_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub mesh: MeshSection,
    pub schedule: ScheduleSection,
    pub covariance: CovarianceSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub guidance: GuidanceSection,
    pub data: DataSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        let guide = GuidanceConfig::default();
        let blob = BlobParams::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            mesh: MeshSection {
                nx: 8,
                ny: 8,
                shape: DomainShape::Square,
                levels: 3,
            },
            schedule: ScheduleSection {
                sigma_min: SIGMA_MIN,
                sigma_max: SIGMA_MAX,
                rho: RHO,
                steps: DEFAULT_STEPS,
            },
            covariance: CovarianceSection {
                length_scale: DEFAULT_LENGTH_SCALE,
                jitter: DEFAULT_JITTER,
            },
            model: ModelSection {
                hidden: net.hidden,
                convs_per_level: net.convs_per_level,
                patch: net.patch,
                mu: net.mu,
                time_dim: net.time_dim,
                omega_scale: net.omega_scale,
                mixing: net.mixing,
            },
            training: TrainingSection {
                batch_size: train.batch_size,
                iterations: train.iterations,
                learning_rate: train.learning_rate,
                beta1: train.beta1,
                beta2: train.beta2,
                epsilon: train.epsilon,
            },
            guidance: GuidanceSection {
                method: Method::Dps,
                zeta: guide.zeta,
                precondition_with_c: guide.precondition_with_c,
                n_levels: guide.n_levels,
                langevin_steps: guide.langevin_steps,
                eta0: guide.eta0,
                noise_std: NOISELESS_STD,
                chains: 16,
            },
            data: DataSection {
                count: 200,
                train_fraction: 0.9,
                max_inclusions: blob.max_inclusions,
                background: blob.background,
                min_conductivity: blob.min_conductivity,
                semi_axis_min: blob.semi_axis_min,
                semi_axis_max: blob.semi_axis_max,
                ratio_min: blob.ratio_range[0],
                ratio_max: blob.ratio_range[1],
                depth_min: blob.depth_range[0],
                depth_max: blob.depth_range[1],
                containment: blob.containment,
            },
            sample: SampleSection { count: 16 },
            eval: EvalSection {
                mmd_length_scale: DEFAULT_MMD_LENGTH_SCALE,
            },
        }
    }
}

macro_rules! config_keys {
    ($( $section:literal $key:literal => $($field:ident).+ : $ty:ty ;)*) => {
        impl RunConfig {
            fn set_key(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
                match (section, key) {
                    $( ($section, $key) => {
                        self.$($field).+ = <$ty as ConfigValue>::parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err("unknown key".into()),
                }
            }

            /// Every key with its current value, in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
                vec![ $( ($section, $key, ConfigValue::show(&self.$($field).+)) ),* ]
            }
        }
    };
}

config_keys! {
    "" "seed" => seed: u64;
    "" "out" => out: PathBuf;
    "mesh" "nx" => mesh.nx: usize;
    "mesh" "ny" => mesh.ny: usize;
    "mesh" "shape" => mesh.shape: DomainShape;
    "mesh" "levels" => mesh.levels: usize;
    "schedule" "sigma_min" => schedule.sigma_min: f64;
    "schedule" "sigma_max" => schedule.sigma_max: f64;
    "schedule" "rho" => schedule.rho: f64;
    "schedule" "steps" => schedule.steps: usize;
    "covariance" "length_scale" => covariance.length_scale: f64;
    "covariance" "jitter" => covariance.jitter: f64;
    "model" "hidden" => model.hidden: usize;
    "model" "convs_per_level" => model.convs_per_level: usize;
    "model" "patch" => model.patch: usize;
    "model" "mu" => model.mu: f64;
    "model" "time_dim" => model.time_dim: usize;
    "model" "omega_scale" => model.omega_scale: f64;
    "model" "mixing" => model.mixing: MixingMode;
    "training" "batch_size" => training.batch_size: usize;
    "training" "iterations" => training.iterations: usize;
    "training" "learning_rate" => training.learning_rate: f64;
    "training" "beta1" => training.beta1: f64;
    "training" "beta2" => training.beta2: f64;
    "training" "epsilon" => training.epsilon: f64;
    "guidance" "method" => guidance.method: Method;
    "guidance" "zeta" => guidance.zeta: f64;
    "guidance" "precondition_with_c" => guidance.precondition_with_c: bool;
    "guidance" "n_levels" => guidance.n_levels: usize;
    "guidance" "langevin_steps" => guidance.langevin_steps: usize;
    "guidance" "eta0" => guidance.eta0: f64;
    "guidance" "noise_std" => guidance.noise_std: f64;
    "guidance" "chains" => guidance.chains: usize;
    "data" "count" => data.count: usize;
    "data" "train_fraction" => data.train_fraction: f64;
    "data" "max_inclusions" => data.max_inclusions: usize;
    "data" "background" => data.background: f64;
    "data" "min_conductivity" => data.min_conductivity: f64;
    "data" "semi_axis_min" => data.semi_axis_min: f64;
    "data" "semi_axis_max" => data.semi_axis_max: f64;
    "data" "ratio_min" => data.ratio_min: f64;
    "data" "ratio_max" => data.ratio_max: f64;
    "data" "depth_min" => data.depth_min: f64;
    "data" "depth_max" => data.depth_max: f64;
    "data" "containment" => data.containment: f64;
    "sample" "count" => sample.count: usize;
    "eval" "mmd_length_scale" => eval.mmd_length_scale: f64;
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl RunConfig {
    /// Applies the lines of a configuration file, collecting one message per bad line.
    pub fn apply_text(&mut self, text: &str, errors: &mut Vec<String>) {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                match rest.strip_suffix(']') {
                    Some(name) => section = name.trim().to_string(),
                    None => errors.push(format!("line {}: malformed section header {line:?}", n + 1)),
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got {line:?}", n + 1));
                continue;
            };
            let key = key.trim();
            if let Err(e) = self.set_key(&section, key, value.trim()) {
                errors.push(format!("{}: {e} (line {})", qualified(&section, key), n + 1));
            }
        }
    }

    /// Applies a `section.key=value` override; top-level keys have no section.
    pub fn apply_override(&mut self, spec: &str, errors: &mut Vec<String>) {
        let Some((path, value)) = spec.split_once('=') else {
            errors.push(format!("override {spec:?} is not `section.key=value`"));
            return;
        };
        let path = path.trim();
        let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
        if let Err(e) = self.set_key(section, key, value.trim()) {
            errors.push(format!("{path}: {e}"));
        }
    }

    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        cfg.apply_text(text, &mut errors);
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// One message per key whose value is out of range.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        let mut need = |ok: bool, key: &str, what: &str| {
            if !ok {
                e.push(format!("{key}: {what}"));
            }
        };
        need(self.mesh.nx >= 1, "mesh.nx", "must be at least 1");
        need(self.mesh.ny >= 1, "mesh.ny", "must be at least 1");
        need(
            self.mesh.levels >= 1 && (self.mesh.levels - 1) < usize::BITS as usize,
            "mesh.levels",
            "must be at least 1",
        );
        let s = &self.schedule;
        need(s.sigma_min > 0.0, "schedule.sigma_min", "must be positive");
        need(s.sigma_max > s.sigma_min, "schedule.sigma_max", "must exceed sigma_min");
        need(s.rho > 0.0, "schedule.rho", "must be positive");
        need(s.steps >= 2, "schedule.steps", "must be at least 2");
        need(self.covariance.length_scale > 0.0, "covariance.length_scale", "must be positive");
        need(self.covariance.jitter >= 0.0, "covariance.jitter", "must be non-negative");
        let m = &self.model;
        need(m.hidden >= 1, "model.hidden", "must be at least 1");
        need(m.patch >= 2, "model.patch", "must be at least 2");
        need(m.mu > 0.0, "model.mu", "must be positive");
        need(m.time_dim >= 2 && m.time_dim % 2 == 0, "model.time_dim", "must be even and positive");
        need(m.omega_scale >= 0.0, "model.omega_scale", "must be non-negative");
        let t = &self.training;
        need(t.batch_size >= 1, "training.batch_size", "must be at least 1");
        need(t.learning_rate >= 0.0, "training.learning_rate", "must be non-negative");
        need((0.0..1.0).contains(&t.beta1), "training.beta1", "must lie in [0, 1)");
        need((0.0..1.0).contains(&t.beta2), "training.beta2", "must lie in [0, 1)");
        need(t.epsilon > 0.0, "training.epsilon", "must be positive");
        let g = &self.guidance;
        need(g.zeta >= 0.0 && g.zeta.is_finite(), "guidance.zeta", "must be finite and non-negative");
        need(g.n_levels >= 1, "guidance.n_levels", "must be at least 1");
        need(g.eta0 >= 0.0 && g.eta0.is_finite(), "guidance.eta0", "must be finite and non-negative");
        need(g.noise_std > 0.0, "guidance.noise_std", "must be positive");
        need(g.chains >= 1, "guidance.chains", "must be at least 1");
        let d = &self.data;
        need(d.count >= 2, "data.count", "must be at least 2");
        need((0.0..=1.0).contains(&d.train_fraction), "data.train_fraction", "must lie in [0, 1]");
        need(d.max_inclusions >= 1, "data.max_inclusions", "must be at least 1");
        need(d.background > d.min_conductivity, "data.background", "must exceed min_conductivity");
        need(d.min_conductivity > 0.0, "data.min_conductivity", "must be positive");
        need(d.semi_axis_min > 0.0, "data.semi_axis_min", "must be positive");
        need(d.semi_axis_max >= d.semi_axis_min, "data.semi_axis_max", "must be >= semi_axis_min");
        need(d.ratio_min > 0.0 && d.ratio_min <= d.ratio_max, "data.ratio_min", "must satisfy 0 < ratio_min <= ratio_max");
        need(d.ratio_max <= 1.0, "data.ratio_max", "must be at most 1");
        need(d.depth_min > 0.0 && d.depth_min <= d.depth_max, "data.depth_min", "must satisfy 0 < depth_min <= depth_max");
        need(d.depth_max <= 1.0, "data.depth_max", "must be at most 1");
        need(d.containment >= 0.0, "data.containment", "must be non-negative");
        need(self.sample.count >= 1, "sample.count", "must be at least 1");
        need(self.eval.mmd_length_scale > 0.0, "eval.mmd_length_scale", "must be positive");
        e
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                writeln!(out, "\n[{section}]").unwrap();
                current = section;
            }
            writeln!(out, "{key} = {value}").unwrap();
        }
        out.trim_start().to_string()
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.schedule.sigma_min,
            sigma_max: self.schedule.sigma_max,
            rho: self.schedule.rho,
            n_steps: self.schedule.steps,
            ..NoiseSchedule::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let m = &self.model;
        NetConfig {
            channels: 1,
            hidden: m.hidden,
            levels: self.mesh.levels,
            convs_per_level: m.convs_per_level,
            patch: m.patch,
            mu: m.mu,
            time_dim: m.time_dim,
            omega_scale: m.omega_scale,
            mixing: m.mixing,
            sigma_min: self.schedule.sigma_min,
            sigma_max: self.schedule.sigma_max,
        }
    }

    pub fn train_config(&self, parallel: bool) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            sigma_min: self.schedule.sigma_min,
            sigma_max: self.schedule.sigma_max,
            seed: self.seed,
            parallel,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            zeta: g.zeta,
            precondition_with_c: g.precondition_with_c,
            n_levels: g.n_levels,
            langevin_steps: g.langevin_steps,
            eta0: g.eta0,
        }
    }

    pub fn blob_params(&self) -> BlobParams {
        let d = &self.data;
        BlobParams {
            max_inclusions: d.max_inclusions,
            background: d.background,
            min_conductivity: d.min_conductivity,
            semi_axis_min: d.semi_axis_min,
            semi_axis_max: d.semi_axis_max,
            ratio_range: [d.ratio_min, d.ratio_max],
            depth_range: [d.depth_min, d.depth_max],
            containment: d.containment,
        }
    }
}
