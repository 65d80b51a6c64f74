//! Finite-element building blocks.
//!
//! The FEM convolution represents a filter as a Q1 (bilinear) function on the reference
//! patch `[-1, 1]^2`, carried by a `P x P` lattice of nodal basis functions. Each node
//! `i` projects its neighbours into the patch with `xi_ij = (x_j - x_i) / r` and
//! aggregates
//!
//! ```text
//! out_i[c'] = sum_c sum_p w[c', c, p] / |N(i)| * sum_{j in N(i)} phi_p(xi_ij) f_j[c]
//! ```
//!
//! A projected neighbour touches at most four basis functions, so the cost per node is
//! linear in the neighbour count.
//!
//! [`poisson`] assembles the P1 stiffness matrix and the P0-to-P1 load map used by the
//! Poisson forward operator.

mod conv;
mod neighbors;
pub mod poisson;
pub mod sparse;

use thiserror::Error;

pub use conv::{
    fem_conv_forward, fem_conv_vjp, FemConvFilter, PatchStencil, FILTER_MAGIC,
};
pub use neighbors::{build_neighbor_table, NeighborTable};
pub use poisson::{
    assemble_poisson, element_stiffness, p1_l2_error, poisson_solve, poisson_vjp, PoissonSystem,
};

/// Slack on the patch boundary for points that land on it up to rounding.
pub const PATCH_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("field has {field} nodes but the neighbour table has {table}")]
    GraphMismatch { field: usize, table: usize },
    #[error("filter radius {filter} does not match table radius {table}")]
    RadiusMismatch { filter: f64, table: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("triangle {tri} is degenerate (area {area:e})")]
    DegenerateTriangle { tri: usize, area: f64 },
    #[error("linear system is singular or not positive definite")]
    SingularSystem,
    #[error("bad filter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-zero Q1 basis weights at one reference point: up to four `(index, weight)` pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BasisWeights {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl BasisWeights {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.len]
            .iter()
            .copied()
            .zip(self.w[..self.len].iter().copied())
    }

    fn push(&mut self, i: usize, w: f64) {
        if w != 0.0 {
            self.idx[self.len] = i;
            self.w[self.len] = w;
            self.len += 1;
        }
    }
}

fn axis(t: f64, p: usize) -> (usize, f64) {
    let u = (t.clamp(-1.0, 1.0) + 1.0) * 0.5 * (p - 1) as f64;
    let k = (u.floor() as usize).min(p - 2);
    (k, u - k as f64)
}

/// Bilinear nodal basis on the `p x p` reference lattice, lattice node `(kx, ky)` at
/// `(-1 + 2 kx / (p - 1), -1 + 2 ky / (p - 1))` with flat index `ky * p + kx`.
///
/// Points outside the patch (beyond [`PATCH_SLACK`]) get no weights.
pub fn reference_basis_eval(xi: [f64; 2], p: usize) -> BasisWeights {
    assert!(p >= 2, "patch resolution must be at least 2");
    let mut out = BasisWeights::default();
    let lim = 1.0 + PATCH_SLACK;
    if !(xi[0].abs() <= lim && xi[1].abs() <= lim) {
        return out;
    }
    let (kx, fx) = axis(xi[0], p);
    let (ky, fy) = axis(xi[1], p);
    out.push(ky * p + kx, (1.0 - fx) * (1.0 - fy));
    out.push(ky * p + kx + 1, fx * (1.0 - fy));
    out.push((ky + 1) * p + kx, (1.0 - fx) * fy);
    out.push((ky + 1) * p + kx + 1, fx * fy);
    out
}
