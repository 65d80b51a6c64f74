use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{time_embedding, Denoiser, ScoreError};
use crate::fem::{build_neighbor_table, NeighborTable, PatchStencil};
use crate::field::Field;
use crate::mesh::MeshHierarchy;
use crate::sde::{SIGMA_MAX, SIGMA_MIN};

/// How a FEM convolution mixes channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingMode {
    /// One `P x P` filter per `(c', c)` pair.
    Dense,
    /// Per-edge gate `(W_g b_ij) ⊙ (W_m h_j)`: channel mixing by `W_m`, then a per-channel
    /// patch filter `W_g`.
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub hidden: usize,
    pub levels: usize,
    pub convs_per_level: usize,
    pub patch: usize,
    pub mu: f64,
    pub time_dim: usize,
    pub omega_scale: f64,
    pub mixing: MixingMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NetConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            channels: 1,
            hidden: 32,
            levels: 3,
            convs_per_level: 2,
            patch: 5,
            mu: 2.0,
            time_dim: 16,
            omega_scale: 10.0,
            mixing: MixingMode::Vector,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
        }
    }
}

impl NetConfig {
    /// Full-size hyperparameters (hidden width 128, 64 time features).
    pub fn full_size() -> Self {
        Self {
            hidden: 128,
            time_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: &str| Err(ScoreError::InvalidConfig(m.into()));
        if self.channels == 0 || self.hidden == 0 || self.levels == 0 {
            return bad("channels, hidden width and levels must be positive");
        }
        if self.patch < 2 {
            return bad("patch resolution must be at least 2");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time embedding dimension must be even and positive");
        }
        if !(self.mu > 0.0) || !(self.omega_scale >= 0.0) {
            return bad("radius multiplier must be positive and frequency scale non-negative");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        Ok(())
    }
}

/// Per-level neighbour tables and patch stencils for one mesh hierarchy.
#[derive(Clone, Debug)]
pub struct NetGeometry {
    hierarchy: MeshHierarchy,
    patch: usize,
    tables: Vec<NeighborTable>,
    stencils: Vec<PatchStencil>,
    positions: Vec<Vec<f64>>,
}

impl NetGeometry {
    pub fn new(hierarchy: MeshHierarchy, patch: usize) -> Result<Self, ScoreError> {
        if patch < 2 {
            return Err(ScoreError::InvalidConfig("patch resolution must be at least 2".into()));
        }
        let mut tables = Vec::new();
        let mut stencils = Vec::new();
        let mut positions = Vec::new();
        for (l, g) in hierarchy.levels.iter().enumerate() {
            let t = build_neighbor_table(&g.positions, hierarchy.radii[l])?;
            stencils.push(PatchStencil::new(&t, patch));
            tables.push(t);
            positions.push(g.positions.iter().flat_map(|p| [p[0], p[1]]).collect());
        }
        Ok(Self {
            hierarchy,
            patch,
            tables,
            stencils,
            positions,
        })
    }

    pub fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn tables(&self) -> &[NeighborTable] {
        &self.tables
    }

    pub fn nodes(&self) -> usize {
        self.hierarchy.levels[0].node_count()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    Normal(f64),
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
enum Mix {
    Dense { w: usize },
    Vector { wm: usize, wg: usize },
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    mix: Mix,
    bias: usize,
    film: Lin,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: [Lin; 2],
    down: Vec<Vec<Conv>>,
    pos: Vec<Lin>,
    restrict: Vec<[Lin; 2]>,
    prolong: Vec<[Lin; 2]>,
    up: Vec<Vec<Conv>>,
    dec: [Lin; 2],
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, out: usize, zero: bool) -> Lin {
        let init = if zero {
            Init::Zero
        } else {
            Init::Normal(1.0 / (fan_in as f64).sqrt())
        };
        Lin {
            w: self.add(format!("{name}.weight"), fan_in, out, init),
            b: self.add(format!("{name}.bias"), 1, out, Init::Zero),
        }
    }

    fn conv(&mut self, name: &str, cfg: &NetConfig) -> Conv {
        let (h, p) = (cfg.hidden, cfg.patch);
        let p2 = p * p;
        let mix = match cfg.mixing {
            MixingMode::Dense => Mix::Dense {
                w: self.add(format!("{name}.filter"), p2 * h, h, Init::Normal(p as f64 / (h as f64).sqrt())),
            },
            MixingMode::Vector => Mix::Vector {
                wm: self.add(format!("{name}.mix"), h, h, Init::Normal(1.0 / (h as f64).sqrt())),
                wg: self.add(format!("{name}.gate"), p2, h, Init::Normal(p as f64)),
            },
        };
        let bias = self.add(format!("{name}.bias"), 1, h, Init::Zero);
        let film = self.lin(&format!("{name}.film"), cfg.time_dim, 2 * h, true);
        Conv { mix, bias, film }
    }
}

fn layout(cfg: &NetConfig) -> (Layout, Vec<Spec>) {
    let mut b = Builder::default();
    let h = cfg.hidden;
    let enc_in = cfg.channels + 2 + cfg.time_dim;
    let enc = [b.lin("encoder.0", enc_in, h, false), b.lin("encoder.1", h, h, false)];
    let mut down = Vec::new();
    let mut pos = Vec::new();
    let mut restrict = Vec::new();
    for l in 0..cfg.levels {
        if l > 0 {
            restrict.push([
                b.lin(&format!("restrict.{l}.0"), h, h, false),
                b.lin(&format!("restrict.{l}.1"), h, h, true),
            ]);
            pos.push(b.lin(&format!("position.{l}"), 2, h, false));
        }
        down.push(
            (0..cfg.convs_per_level)
                .map(|k| b.conv(&format!("down.{l}.{k}"), cfg))
                .collect(),
        );
    }
    let mut prolong = Vec::new();
    let mut up = Vec::new();
    for l in 0..cfg.levels.saturating_sub(1) {
        prolong.push([
            b.lin(&format!("prolong.{l}.0"), 2 * h, h, false),
            b.lin(&format!("prolong.{l}.1"), h, h, true),
        ]);
        up.push(
            (0..cfg.convs_per_level)
                .map(|k| b.conv(&format!("up.{l}.{k}"), cfg))
                .collect(),
        );
    }
    let dec = [b.lin("decoder.0", h, h, false), b.lin("decoder.1", h, cfg.channels, true)];
    (
        Layout {
            enc,
            down,
            pos,
            restrict,
            prolong,
            up,
            dec,
        },
        b.specs,
    )
}

/// Parameter tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Multiscale FEM-convolution denoiser: encoder, down/up sweep over a mesh hierarchy with
/// FiLM time conditioning, decoder. Parameters only; the mesh enters via [`NetGeometry`].
#[derive(Clone, Debug)]
pub struct ScoreNet {
    config: NetConfig,
    omega: Vec<f64>,
    params: Vec<Tensor>,
    names: Vec<String>,
    layout: Layout,
}

impl ScoreNet {
    pub fn new<R: rand::Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self, ScoreError> {
        config.validate()?;
        let omega_law = Normal::new(0.0, config.omega_scale).expect("scale is non-negative");
        let omega: Vec<f64> = (0..config.time_dim / 2).map(|_| omega_law.sample(rng)).collect();
        let (layout, specs) = layout(&config);
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for s in specs {
            let data = match s.init {
                Init::Zero => vec![0.0; s.rows * s.cols],
                Init::Normal(std) => {
                    let law = Normal::new(0.0, std).expect("std is positive");
                    (0..s.rows * s.cols).map(|_| law.sample(rng)).collect()
                }
            };
            params.push(Tensor {
                rows: s.rows,
                cols: s.cols,
                data,
            });
            names.push(s.name);
        }
        Ok(Self {
            config,
            omega,
            params,
            names,
            layout,
        })
    }

    /// Rebuilds a network from stored frequencies and tensors, checking shapes.
    pub fn from_parts(config: NetConfig, omega: Vec<f64>, params: Vec<Tensor>) -> Result<Self, ScoreError> {
        config.validate()?;
        if omega.len() != config.time_dim / 2 {
            return Err(ScoreError::Shape(format!(
                "expected {} frequencies, got {}",
                config.time_dim / 2,
                omega.len()
            )));
        }
        let (layout, specs) = layout(&config);
        if specs.len() != params.len() {
            return Err(ScoreError::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if (s.rows, s.cols) != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(ScoreError::Shape(format!(
                    "tensor {} should be {}x{}, got {}x{}",
                    s.name, s.rows, s.cols, p.rows, p.cols
                )));
            }
        }
        Ok(Self {
            config,
            omega,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    fn check(&self, geom: &NetGeometry, a: &Field) -> Result<(), ScoreError> {
        if geom.hierarchy.num_levels() != self.config.levels {
            return Err(ScoreError::Shape(format!(
                "network has {} levels, hierarchy has {}",
                self.config.levels,
                geom.hierarchy.num_levels()
            )));
        }
        if (geom.hierarchy.mu - self.config.mu).abs() > 1e-12 * self.config.mu {
            return Err(ScoreError::Shape(format!(
                "network radius multiplier {} differs from hierarchy {}",
                self.config.mu, geom.hierarchy.mu
            )));
        }
        if geom.patch != self.config.patch {
            return Err(ScoreError::Shape(format!(
                "network patch {} differs from geometry patch {}",
                self.config.patch, geom.patch
            )));
        }
        if a.nodes() != geom.nodes() || a.channels() != self.config.channels {
            return Err(ScoreError::Shape(format!(
                "input is {}x{}, expected {}x{}",
                a.nodes(),
                a.channels(),
                geom.nodes(),
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Records the forward pass; returns parameter leaves, the input leaf and the output.
    fn record<'g>(
        &self,
        t: &mut Tape<'g>,
        geom: &'g NetGeometry,
        a: &Field,
        sigma: f64,
    ) -> (Vec<Var>, Var, Var) {
        let cfg = &self.config;
        let lay = &self.layout;
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|x| t.leaf(x.rows, x.cols, x.data.clone()))
            .collect();
        let hier = &geom.hierarchy;
        let n0 = geom.nodes();
        let input = t.leaf(n0, cfg.channels, a.values().to_vec());
        let scaled = t.scale(input, 1.0 / (1.0 + sigma * sigma).sqrt());
        let gamma = t.leaf(
            1,
            cfg.time_dim,
            time_embedding(sigma, &self.omega, cfg.sigma_min, cfg.sigma_max),
        );
        let pos0 = t.leaf(n0, 2, geom.positions[0].clone());
        let gb = t.broadcast(gamma, n0);
        let e = t.concat(scaled, pos0);
        let e = t.concat(e, gb);
        let lin = |t: &mut Tape<'g>, x: Var, l: Lin| t.linear(x, p[l.w], p[l.b]);
        let mlp = |t: &mut Tape<'g>, x: Var, m: [Lin; 2]| {
            let y = lin(t, x, m[0]);
            let y = t.silu(y);
            lin(t, y, m[1])
        };
        let block = |t: &mut Tape<'g>, h: Var, c: Conv, level: usize| {
            let st = &geom.stencils[level];
            let u = match c.mix {
                Mix::Dense { w } => {
                    let g = t.aggregate(h, st);
                    t.matmul(g, p[w])
                }
                Mix::Vector { wm, wg } => {
                    let m = t.matmul(h, p[wm]);
                    let g = t.aggregate(m, st);
                    t.gate_contract(g, p[wg])
                }
            };
            let u = t.add_row(u, p[c.bias]);
            let ab = lin(t, gamma, c.film);
            let u = t.film(u, ab);
            let u = t.silu(u);
            t.add(h, u)
        };
        let mut h = mlp(t, e, lay.enc);
        let mut skips = Vec::new();
        for l in 0..cfg.levels {
            if l > 0 {
                let m = t.pool(h, hier, l - 1);
                let r = mlp(t, m, lay.restrict[l - 1]);
                h = t.add(m, r);
                let nl = hier.levels[l].node_count();
                let x = t.leaf(nl, 2, geom.positions[l].clone());
                let px = lin(t, x, lay.pos[l - 1]);
                h = t.add(h, px);
            }
            for &c in &lay.down[l] {
                h = block(t, h, c, l);
            }
            if l + 1 < cfg.levels {
                skips.push(h);
            }
        }
        for l in (0..cfg.levels.saturating_sub(1)).rev() {
            let b = t.unpool(h, hier, l);
            let cat = t.concat(b, skips[l]);
            let r = mlp(t, cat, lay.prolong[l]);
            h = t.add(b, r);
            for &c in &lay.up[l] {
                h = block(t, h, c, l);
            }
        }
        let out = mlp(t, h, lay.dec);
        (p, input, out)
    }

    pub fn forward(&self, geom: &NetGeometry, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
        self.check(geom, a)?;
        let mut t = Tape::new();
        let (_, _, out) = self.record(&mut t, geom, a, sigma);
        Ok(Field::new(a.nodes(), a.channels(), t.value(out).to_vec()).expect("shape is consistent"))
    }

    /// Gradient of `<upstream, forward(a)>` with respect to `a`.
    pub fn input_vjp(&self, geom: &NetGeometry, a: &Field, sigma: f64, upstream: &Field) -> Result<Field, ScoreError> {
        self.check(geom, a)?;
        if !upstream.same_shape(a) {
            return Err(ScoreError::Shape("upstream differs from input shape".into()));
        }
        let mut t = Tape::new();
        let (_, input, out) = self.record(&mut t, geom, a, sigma);
        let grads = t.backward(out, upstream.values().to_vec());
        let g = grads[input.index()].clone();
        let g = if g.is_empty() { vec![0.0; a.values().len()] } else { g };
        Ok(Field::new(a.nodes(), a.channels(), g).expect("shape is consistent"))
    }

    /// Node-mean squared error against `target` and its gradient for every parameter tensor.
    pub fn loss_and_grad(
        &self,
        geom: &NetGeometry,
        a: &Field,
        sigma: f64,
        target: &Field,
    ) -> Result<(f64, Vec<Vec<f64>>), ScoreError> {
        self.check(geom, a)?;
        if !target.same_shape(a) {
            return Err(ScoreError::Shape("target differs from input shape".into()));
        }
        let mut t = Tape::new();
        let (p, _, out) = self.record(&mut t, geom, a, sigma);
        let loss = t.mse(out, target.values().to_vec());
        let grads = t.backward(loss, vec![1.0]);
        let pg = p
            .iter()
            .zip(&self.params)
            .map(|(v, x)| {
                let g = &grads[v.index()];
                if g.is_empty() {
                    vec![0.0; x.data.len()]
                } else {
                    g.clone()
                }
            })
            .collect();
        Ok((t.value(loss)[0], pg))
    }

    /// Binds the network to a geometry as a [`Denoiser`].
    pub fn bind<'a>(&'a self, geom: &'a NetGeometry) -> BoundScoreNet<'a> {
        BoundScoreNet { net: self, geom }
    }
}

#[derive(Clone, Copy)]
pub struct BoundScoreNet<'a> {
    net: &'a ScoreNet,
    geom: &'a NetGeometry,
}

impl Denoiser for BoundScoreNet<'_> {
    fn denoise(&self, a: &Field, sigma: f64) -> Result<Field, ScoreError> {
        self.net.forward(self.geom, a, sigma)
    }

    fn vjp(&self, a: &Field, sigma: f64, upstream: &Field) -> Result<Field, ScoreError> {
        self.net.input_vjp(self.geom, a, sigma, upstream)
    }
}
