//! Conductivity-style fields built from anisotropic Gaussian inclusions, and dataset folders.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{Field, FieldError};
use crate::mesh::{DomainShape, DualGraph, Point};

pub const REJECTION_BUDGET: usize = 10_000;
const RING_POINTS: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid blob parameters: {0}")]
    InvalidParams(String),
    #[error("no admissible inclusion centre after {0} attempts")]
    RejectionBudgetExceeded(usize),
    #[error("dataset needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("bad dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub max_inclusions: usize,
    pub background: f64,
    pub min_conductivity: f64,
    pub semi_axis_min: f64,
    pub semi_axis_max: f64,
    pub ratio_range: [f64; 2],
    pub depth_range: [f64; 2],
    /// Radius multiplier of the disc that must fit inside the domain.
    pub containment: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            max_inclusions: 3,
            background: 1.0,
            min_conductivity: 0.1,
            semi_axis_min: 0.05,
            semi_axis_max: 0.15,
            ratio_range: [0.5, 1.0],
            depth_range: [0.5, 1.0],
            containment: 2.0,
        }
    }
}

impl BlobParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParams(m));
        if self.max_inclusions == 0 {
            return bad("max_inclusions must be at least 1".into());
        }
        if !(0.0 < self.min_conductivity && self.min_conductivity < self.background) {
            return bad(format!(
                "need 0 < min_conductivity < background, got {} and {}",
                self.min_conductivity, self.background
            ));
        }
        if !(0.0 < self.semi_axis_min && self.semi_axis_min <= self.semi_axis_max) {
            return bad(format!(
                "need 0 < semi_axis_min <= semi_axis_max, got {} and {}",
                self.semi_axis_min, self.semi_axis_max
            ));
        }
        for (name, [lo, hi]) in [("ratio_range", self.ratio_range), ("depth_range", self.depth_range)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
            }
        }
        if !(self.containment >= 0.0) {
            return bad(format!("containment must be non-negative, got {}", self.containment));
        }
        Ok(())
    }
}

/// One rotated anisotropic Gaussian dip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub center: Point,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    /// Value at the centre.
    pub value: f64,
}

impl Inclusion {
    pub fn eval(&self, background: f64, x: Point) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        self.value - (background - self.value) * (-0.5 * (u * u + v * v)).exp_m1()
    }
}

/// Pointwise minimum over inclusions; `background` where there are none.
pub fn evaluate_blobs(inclusions: &[Inclusion], background: f64, x: Point) -> f64 {
    inclusions
        .iter()
        .map(|inc| inc.eval(background, x))
        .fold(background, f64::min)
}

fn disc_inside(domain: DomainShape, c: Point, radius: f64) -> bool {
    domain.contains(c)
        && (0..RING_POINTS).all(|k| {
            let t = std::f64::consts::TAU * k as f64 / RING_POINTS as f64;
            domain.contains([c[0] + radius * t.cos(), c[1] + radius * t.sin()])
        })
}

pub fn draw_inclusions<R: Rng + ?Sized>(
    params: &BlobParams,
    domain: DomainShape,
    rng: &mut R,
) -> Result<Vec<Inclusion>, DataError> {
    params.validate()?;
    let count = rng.random_range(1..=params.max_inclusions);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(params.semi_axis_min..=params.semi_axis_max);
        let b = a * rng.random_range(params.ratio_range[0]..=params.ratio_range[1]);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let depth = rng.random_range(params.depth_range[0]..=params.depth_range[1]);
        let value = params.background - depth * (params.background - params.min_conductivity);
        let radius = params.containment * a.max(b);
        let mut center = None;
        for _ in 0..REJECTION_BUDGET {
            let c = [rng.random::<f64>(), rng.random::<f64>()];
            if disc_inside(domain, c, radius) {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or(DataError::RejectionBudgetExceeded(REJECTION_BUDGET))?;
        out.push(Inclusion {
            center,
            a,
            b,
            angle,
            value,
        });
    }
    Ok(out)
}

pub fn blob_field(positions: &[Point], inclusions: &[Inclusion], background: f64) -> Field {
    Field::scalar(positions.iter().map(|&x| evaluate_blobs(inclusions, background, x)).collect())
}

/// Draws inclusions and evaluates them at the graph nodes.
pub fn gaussian_blob_field<R: Rng + ?Sized>(
    graph: &DualGraph,
    params: &BlobParams,
    domain: DomainShape,
    rng: &mut R,
) -> Result<Field, DataError> {
    let inc = draw_inclusions(params, domain, rng)?;
    Ok(blob_field(&graph.positions, &inc, params.background))
}

/// SHA-256 over node positions and edges, hex encoded.
pub fn graph_hash(graph: &DualGraph) -> String {
    let mut h = Sha256::new();
    h.update((graph.positions.len() as u64).to_le_bytes());
    for p in &graph.positions {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
    }
    h.update((graph.edges.len() as u64).to_le_bytes());
    for &(i, j) in &graph.edges {
        h.update((i as u64).to_le_bytes());
        h.update((j as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub params: BlobParams,
    pub domain: DomainShape,
    pub seed: u64,
    pub count: usize,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub nodes: usize,
    pub graph_hash: String,
    pub warnings: Vec<String>,
}

pub const SPLIT_DEGENERATE: &str = "SplitDegenerate";

/// `(⌈fraction · count⌉, rest)`, clamped to `count`.
pub fn split_sizes(count: usize, train_fraction: f64) -> (usize, usize) {
    // the tolerance keeps 0.9 * 10 from rounding up to 10
    let t = ((train_fraction * count as f64) - 1e-9).ceil().max(0.0) as usize;
    let t = t.min(count);
    (t, count - t)
}

fn sample_path(dir: &Path, split: &str, k: usize) -> PathBuf {
    dir.join(split).join(format!("{k:05}.fld"))
}

/// Writes `count` blob fields under `dir` with a train/test split and `manifest.json`.
/// Sample `k` uses its own stream, so the output does not depend on thread count.
pub fn generate_dataset(
    graph: &DualGraph,
    params: &BlobParams,
    domain: DomainShape,
    count: usize,
    train_fraction: f64,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DataError> {
    params.validate()?;
    if count < 2 {
        return Err(DataError::TooFewSamples(count));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::InvalidParams(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let dir = dir.as_ref();
    let (n_train, n_test) = split_sizes(count, train_fraction);
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    let fields: Vec<Field> = (0..count)
        .into_par_iter()
        .map(|k| gaussian_blob_field(graph, params, domain, &mut crate::rng::stream(seed, "data", k as u64)))
        .collect::<Result<_, _>>()?;
    for (k, f) in fields.iter().enumerate() {
        let path = if k < n_train {
            sample_path(dir, "train", k)
        } else {
            sample_path(dir, "test", k - n_train)
        };
        f.save(path)?;
    }
    let mut warnings = Vec::new();
    if n_test == 0 || n_train == 0 {
        warnings.push(SPLIT_DEGENERATE.to_string());
    }
    let manifest = DatasetManifest {
        params: params.clone(),
        domain,
        seed,
        count,
        train_fraction,
        n_train,
        n_test,
        nodes: graph.node_count(),
        graph_hash: graph_hash(graph),
        warnings,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Field>,
    pub test: Vec<Field>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let read = |split: &str, n: usize| -> Result<Vec<Field>, DataError> {
        (0..n)
            .map(|k| {
                let f = Field::load(sample_path(dir, split, k))?;
                if f.nodes() != manifest.nodes {
                    return Err(DataError::Format(format!(
                        "{split} sample {k} has {} nodes, manifest says {}",
                        f.nodes(),
                        manifest.nodes
                    )));
                }
                Ok(f)
            })
            .collect()
    };
    let train = read("train", manifest.n_train)?;
    let test = read("test", manifest.n_test)?;
    Ok(Dataset { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{dual_graph, triangulate_unit_square};
    use proptest::prelude::{any, prop_assert, proptest};

    fn inc(center: Point, a: f64, b: f64, angle: f64, value: f64) -> Inclusion {
        Inclusion {
            center,
            a,
            b,
            angle,
            value,
        }
    }

    #[test]
    fn centre_far_field_and_min() {
        let i1 = inc([0.3, 0.4], 0.1, 0.06, 0.7, 0.2);
        assert_eq!(evaluate_blobs(&[i1], 1.0, [0.3, 0.4]), 0.2);
        // exponent far below -50
        assert!((evaluate_blobs(&[i1], 1.0, [0.3 + 2.0, 0.4]) - 1.0).abs() < 1e-15);
        let i2 = inc([0.32, 0.41], 0.1, 0.1, 0.0, 0.6);
        assert_eq!(evaluate_blobs(&[i1, i2], 1.0, [0.3, 0.4]), 0.2);
        assert_eq!(evaluate_blobs(&[], 1.0, [0.5, 0.5]), 1.0);
    }

    #[test]
    fn generator_matches_independent_formula() {
        let g = dual_graph(&triangulate_unit_square(6, 6).unwrap());
        let params = BlobParams::default();
        let mut rng = crate::rng::seeded(4);
        let incs = draw_inclusions(&params, DomainShape::Square, &mut rng).unwrap();
        let f = blob_field(&g.positions, &incs, params.background);
        assert_eq!(
            f,
            gaussian_blob_field(&g, &params, DomainShape::Square, &mut crate::rng::seeded(4)).unwrap()
        );
        let mut pts = crate::rng::seeded(5);
        for _ in 0..100 {
            let x = [pts.random::<f64>(), pts.random::<f64>()];
            let mut want = f64::INFINITY;
            for i in &incs {
                // rotate the offset by -angle, scale by semi-axes
                let (dx, dy) = (x[0] - i.center[0], x[1] - i.center[1]);
                let u = dx * i.angle.cos() + dy * i.angle.sin();
                let v = dy * i.angle.cos() - dx * i.angle.sin();
                let q = (u / i.a).powi(2) + (v / i.b).powi(2);
                want = want.min(1.0 - (1.0 - i.value) * (-q / 2.0).exp());
            }
            assert!((evaluate_blobs(&incs, 1.0, x) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inclusion_count_is_uniform() {
        let params = BlobParams::default();
        let mut counts = [0usize; 3];
        let mut rng = crate::rng::seeded(6);
        let n = 10_000;
        for _ in 0..n {
            counts[draw_inclusions(&params, DomainShape::Square, &mut rng).unwrap().len() - 1] += 1;
        }
        let p = 1.0 / 3.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn centres_respect_masked_domains() {
        let small = BlobParams {
            semi_axis_min: 0.02,
            semi_axis_max: 0.05,
            ..BlobParams::default()
        };
        let mut rng = crate::rng::seeded(7);
        for shape in DomainShape::ALL {
            let params = match shape {
                DomainShape::Square | DomainShape::Circle => BlobParams::default(),
                _ => small.clone(),
            };
            for _ in 0..50 {
                for i in draw_inclusions(&params, shape, &mut rng).unwrap() {
                    assert!(disc_inside(shape, i.center, params.containment * i.a.max(i.b)));
                }
            }
        }
        let huge = BlobParams {
            semi_axis_min: 0.6,
            semi_axis_max: 0.6,
            ..BlobParams::default()
        };
        assert!(matches!(
            draw_inclusions(&huge, DomainShape::Square, &mut rng),
            Err(DataError::RejectionBudgetExceeded(_))
        ));
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(10, 0.9), (9, 1));
        assert_eq!(split_sizes(2, 0.9), (2, 0));
        assert_eq!(split_sizes(200, 0.9), (180, 20));
        assert_eq!(split_sizes(7, 0.5), (4, 3));
    }

    #[test]
    fn dataset_is_reproducible_and_loads() {
        let g = dual_graph(&triangulate_unit_square(3, 3).unwrap());
        let p = BlobParams::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = generate_dataset(&g, &p, DomainShape::Square, 10, 0.9, 42, d1.path()).unwrap();
        generate_dataset(&g, &p, DomainShape::Square, 10, 0.9, 42, d2.path()).unwrap();
        assert_eq!((m.n_train, m.n_test), (9, 1));
        assert!(m.warnings.is_empty());
        for rel in ["manifest.json", "train/00000.fld", "train/00008.fld", "test/00000.fld"] {
            assert_eq!(
                std::fs::read(d1.path().join(rel)).unwrap(),
                std::fs::read(d2.path().join(rel)).unwrap()
            );
        }
        let ds = load_dataset(d1.path()).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (9, 1));
        assert_eq!(ds.manifest, m);
        let d3 = tempfile::tempdir().unwrap();
        let m = generate_dataset(&g, &p, DomainShape::Square, 2, 0.9, 1, d3.path()).unwrap();
        assert_eq!((m.n_train, m.n_test), (2, 0));
        assert_eq!(m.warnings, vec![SPLIT_DEGENERATE.to_string()]);
        assert!(generate_dataset(&g, &p, DomainShape::Square, 1, 0.9, 1, d3.path()).is_err());
    }

    proptest! {
        #[test]
        fn values_stay_in_bounds(seed in any::<u64>()) {
            let g = dual_graph(&triangulate_unit_square(5, 5).unwrap());
            let p = BlobParams::default();
            let f = gaussian_blob_field(&g, &p, DomainShape::Square, &mut crate::rng::seeded(seed)).unwrap();
            for &v in f.values() {
                prop_assert!(v >= p.min_conductivity - 1e-12 && v <= p.background + 1e-12);
            }
        }

        #[test]
        fn rotating_grid_and_inclusions_rotates_field(seed in any::<u64>(), theta in 0.0..std::f64::consts::TAU) {
            let p = BlobParams::default();
            let incs = draw_inclusions(&p, DomainShape::Square, &mut crate::rng::seeded(seed)).unwrap();
            let (s, c) = theta.sin_cos();
            let rot = |x: Point| [0.5 + c * (x[0] - 0.5) - s * (x[1] - 0.5), 0.5 + s * (x[0] - 0.5) + c * (x[1] - 0.5)];
            let turned: Vec<Inclusion> = incs
                .iter()
                .map(|i| Inclusion { center: rot(i.center), angle: i.angle + theta, ..*i })
                .collect();
            let g = dual_graph(&triangulate_unit_square(4, 4).unwrap());
            let moved: Vec<Point> = g.positions.iter().map(|&x| rot(x)).collect();
            let a = blob_field(&g.positions, &incs, p.background);
            let b = blob_field(&moved, &turned, p.background);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
