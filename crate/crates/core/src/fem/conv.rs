use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{reference_basis_eval, FemError, NeighborTable};
use crate::field::Field;

pub const FILTER_MAGIC: &[u8; 4] = b"FCW1";

/// Node count above which the forward pass is split across threads.
const PARALLEL_NODES: usize = 4096;

/// Filter coefficients on the `P x P` reference lattice for every `(c', c)` channel pair.
///
/// Weight layout is `w[((co * c_in + ci) * P + py) * P + px]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FemConvFilter {
    weights: Vec<f64>,
    c_out: usize,
    c_in: usize,
    p: usize,
    radius: f64,
}

impl FemConvFilter {
    pub fn new(
        c_out: usize,
        c_in: usize,
        p: usize,
        radius: f64,
        weights: Vec<f64>,
    ) -> Result<Self, FemError> {
        if p < 2 {
            return Err(FemError::InvalidParameter(format!("patch resolution {p} < 2")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(FemError::InvalidParameter(format!("radius {radius} must be positive")));
        }
        if weights.len() != c_out * c_in * p * p {
            return Err(FemError::Shape(format!(
                "expected {} weights for {c_out}x{c_in}x{p}x{p}, got {}",
                c_out * c_in * p * p,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FemError::InvalidParameter("non-finite filter weight".into()));
        }
        Ok(FemConvFilter {
            weights,
            c_out,
            c_in,
            p,
            radius,
        })
    }

    pub fn constant(c_out: usize, c_in: usize, p: usize, radius: f64, value: f64) -> Result<Self, FemError> {
        Self::new(c_out, c_in, p, radius, vec![value; c_out * c_in * p * p])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn patch_resolution(&self) -> usize {
        self.p
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self, FemError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(FemError::InvalidParameter(format!("radius {radius} must be positive")));
        }
        self.radius = radius;
        Ok(self)
    }

    fn index(&self, co: usize, ci: usize, p: usize) -> usize {
        (co * self.c_in + ci) * self.p * self.p + p
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FemError> {
        w.write_all(FILTER_MAGIC)?;
        for d in [self.c_out, self.c_in, self.p] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a filter file; the radius is not stored and must be supplied.
    pub fn read_from<R: Read>(mut r: R, radius: f64) -> Result<Self, FemError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| FemError::Format("missing header".into()))?;
        if &magic != FILTER_MAGIC {
            return Err(FemError::Format("bad magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| FemError::Format("truncated header".into()))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [c_out, c_in, p] = dims;
        let n = c_out
            .checked_mul(c_in)
            .and_then(|v| v.checked_mul(p * p))
            .ok_or_else(|| FemError::Format("dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(FemError::Format(format!(
                "expected {} weight bytes, found {}",
                n * 8,
                bytes.len()
            )));
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(c_out, c_in, p, radius, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FemError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, radius: f64) -> Result<Self, FemError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), radius)
    }
}

fn check(field: &Field, filter: &FemConvFilter, table: &NeighborTable) -> Result<(), FemError> {
    if field.nodes() != table.len() {
        return Err(FemError::GraphMismatch {
            field: field.nodes(),
            table: table.len(),
        });
    }
    let (a, b) = (filter.radius, table.radius());
    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
        return Err(FemError::RadiusMismatch { filter: a, table: b });
    }
    if field.channels() != filter.c_in {
        return Err(FemError::Shape(format!(
            "field has {} channels, filter expects {}",
            field.channels(),
            filter.c_in
        )));
    }
    Ok(())
}

fn forward_node(i: usize, f: &Field, filter: &FemConvFilter, table: &NeighborTable, out: &mut [f64]) {
    let c_in = filter.c_in;
    let inv = 1.0 / table.degree(i) as f64;
    for (&j, &xi) in table.neighbors(i).iter().zip(table.xi(i)) {
        let fj = f.row(j);
        for (p, phi) in reference_basis_eval(xi, filter.p).iter() {
            let s = phi * inv;
            for (co, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    acc += filter.weights[filter.index(co, ci, p)] * fj[ci];
                }
                *o += s * acc;
            }
        }
    }
}

/// Applies the FEM convolution at every node.
pub fn fem_conv_forward(
    field: &Field,
    filter: &FemConvFilter,
    table: &NeighborTable,
) -> Result<Field, FemError> {
    check(field, filter, table)?;
    let n = field.nodes();
    let co = filter.c_out;
    let mut out = vec![0.0; n * co];
    if co > 0 {
        if n >= PARALLEL_NODES {
            out.par_chunks_mut(co)
                .enumerate()
                .for_each(|(i, row)| forward_node(i, field, filter, table, row));
        } else {
            for (i, row) in out.chunks_mut(co).enumerate() {
                forward_node(i, field, filter, table, row);
            }
        }
    }
    Ok(Field::new(n, co, out).expect("shape is consistent"))
}

/// Gradients of `<upstream, fem_conv_forward(field)>` with respect to the weights and field.
pub fn fem_conv_vjp(
    field: &Field,
    filter: &FemConvFilter,
    table: &NeighborTable,
    upstream: &Field,
) -> Result<(Vec<f64>, Field), FemError> {
    check(field, filter, table)?;
    if upstream.nodes() != field.nodes() || upstream.channels() != filter.c_out {
        return Err(FemError::Shape(format!(
            "upstream is {}x{}, expected {}x{}",
            upstream.nodes(),
            upstream.channels(),
            field.nodes(),
            filter.c_out
        )));
    }
    let c_in = filter.c_in;
    let mut gw = vec![0.0; filter.weights.len()];
    let mut gf = vec![0.0; field.nodes() * c_in];
    for i in 0..field.nodes() {
        let inv = 1.0 / table.degree(i) as f64;
        let up = upstream.row(i);
        for (&j, &xi) in table.neighbors(i).iter().zip(table.xi(i)) {
            let fj = field.row(j);
            for (p, phi) in reference_basis_eval(xi, filter.p).iter() {
                let s = phi * inv;
                for (co, &u) in up.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    let su = s * u;
                    for ci in 0..c_in {
                        let k = filter.index(co, ci, p);
                        gw[k] += su * fj[ci];
                        gf[j * c_in + ci] += su * filter.weights[k];
                    }
                }
            }
        }
    }
    Ok((gw, Field::new(field.nodes(), c_in, gf).expect("shape is consistent")))
}

/// The neighbour aggregation of a [`NeighborTable`] at a fixed patch resolution, stored as
/// a sparse map from node fields to per-node patch coefficients.
///
/// `apply` returns `G[i, p, c] = (1 / |N(i)|) sum_j phi_p(xi_ij) f_j[c]`, laid out as
/// `(i * P^2 + p) * C + c`, so a dense convolution is the contraction
/// `out_i[c'] = sum_{c, p} w[c', c, p] G[i, p, c]`.
#[derive(Clone, Debug)]
pub struct PatchStencil {
    nodes: usize,
    p2: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, u32, f64)>,
}

impl PatchStencil {
    pub fn new(table: &NeighborTable, p: usize) -> Self {
        let mut offsets = Vec::with_capacity(table.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for i in 0..table.len() {
            let inv = 1.0 / table.degree(i) as f64;
            for (&j, &xi) in table.neighbors(i).iter().zip(table.xi(i)) {
                for (k, phi) in reference_basis_eval(xi, p).iter() {
                    entries.push((j as u32, k as u32, phi * inv));
                }
            }
            offsets.push(entries.len());
        }
        PatchStencil {
            nodes: table.len(),
            p2: p * p,
            offsets,
            entries,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn patch_size(&self) -> usize {
        self.p2
    }

    /// `f` is `nodes x channels` row-major; the result is `nodes x P^2 x channels`.
    pub fn apply(&self, f: &[f64], channels: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.nodes * self.p2 * channels];
        let fill = |(i, gi): (usize, &mut [f64])| {
            for &(j, k, w) in &self.entries[self.offsets[i]..self.offsets[i + 1]] {
                let src = &f[j as usize * channels..(j as usize + 1) * channels];
                let dst = &mut gi[k as usize * channels..(k as usize + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        };
        let chunk = (self.p2 * channels).max(1);
        if self.nodes >= PARALLEL_NODES {
            g.par_chunks_mut(chunk).enumerate().for_each(fill);
        } else {
            g.chunks_mut(chunk).enumerate().for_each(fill);
        }
        g
    }

    /// Adjoint of [`Self::apply`].
    pub fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.nodes * channels];
        for i in 0..self.nodes {
            let gi = &g[i * self.p2 * channels..(i + 1) * self.p2 * channels];
            for &(j, k, w) in &self.entries[self.offsets[i]..self.offsets[i + 1]] {
                let src = &gi[k as usize * channels..(k as usize + 1) * channels];
                let dst = &mut f[j as usize * channels..(j as usize + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        f
    }
}
