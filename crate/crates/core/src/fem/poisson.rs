//! P1 finite elements for `-Δu = a` with homogeneous Dirichlet data, where `a` is
//! piecewise constant on triangles.

use nalgebra::{DMatrix, DVector};

use super::sparse::{CsrMatrix, EnvelopeCholesky};
use super::FemError;
use crate::field::Field;
use crate::mesh::{Point, TriMesh, MIN_AREA};

/// Systems smaller than this are factorised densely.
const DENSE_LIMIT: usize = 500;

#[derive(Clone, Debug)]
enum Solver {
    Empty,
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Envelope(EnvelopeCholesky),
}

/// Assembled and factorised Poisson problem on one mesh.
#[derive(Clone, Debug)]
pub struct PoissonSystem {
    n_vertices: usize,
    n_cells: usize,
    dof_of_vertex: Vec<Option<usize>>,
    interior: Vec<usize>,
    dirichlet: Vec<usize>,
    stiffness: CsrMatrix,
    load_map: CsrMatrix,
    solver: Solver,
}

/// Exact P1 stiffness `∫ ∇φ_a · ∇φ_b` on one triangle.
pub fn element_stiffness(p: [Point; 3]) -> Result<[[f64; 3]; 3], FemError> {
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * area2.abs();
    if !(area >= MIN_AREA) {
        return Err(FemError::DegenerateTriangle { tri: 0, area });
    }
    // gradients of the barycentric coordinates are (b_a, c_a) / (2A)
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    Ok(k)
}

pub fn assemble_poisson(mesh: &TriMesh) -> Result<PoissonSystem, FemError> {
    let nv = mesh.vertices().len();
    let nc = mesh.triangles().len();
    let mut dof_of_vertex = vec![None; nv];
    let mut interior = Vec::new();
    for (v, dof) in dof_of_vertex.iter_mut().enumerate() {
        if !mesh.is_boundary(v) {
            *dof = Some(interior.len());
            interior.push(v);
        }
    }
    let mut k_trips = Vec::with_capacity(9 * nc);
    let mut q_trips = Vec::with_capacity(3 * nc);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let ke = element_stiffness(mesh.triangle_points(t)).map_err(|e| match e {
            FemError::DegenerateTriangle { area, .. } => FemError::DegenerateTriangle { tri: t, area },
            other => other,
        })?;
        let third = mesh.area(t) / 3.0;
        for a in 0..3 {
            q_trips.push((tri[a], t, third));
            let Some(da) = dof_of_vertex[tri[a]] else { continue };
            for b in 0..3 {
                if let Some(db) = dof_of_vertex[tri[b]] {
                    k_trips.push((da, db, ke[a][b]));
                }
            }
        }
    }
    let n = interior.len();
    let stiffness = CsrMatrix::from_triplets(n, n, k_trips);
    let load_map = CsrMatrix::from_triplets(nv, nc, q_trips);
    let solver = if n == 0 {
        Solver::Empty
    } else if n < DENSE_LIMIT {
        let mut d = DMatrix::zeros(n, n);
        for r in 0..n {
            for (c, v) in stiffness.row(r) {
                d[(r, c)] = v;
            }
        }
        Solver::Dense(d.cholesky().ok_or(FemError::SingularSystem)?)
    } else {
        Solver::Envelope(EnvelopeCholesky::factor(&stiffness).ok_or(FemError::SingularSystem)?)
    };
    Ok(PoissonSystem {
        n_vertices: nv,
        n_cells: nc,
        dof_of_vertex,
        dirichlet: mesh.boundary_vertices().to_vec(),
        interior,
        stiffness,
        load_map,
        solver,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl PoissonSystem {
    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Stiffness restricted to interior vertices, indexed by interior dof.
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// `Q[v, c] = area(c) / 3` for each vertex `v` of cell `c`.
    pub fn load_map(&self) -> &CsrMatrix {
        &self.load_map
    }

    pub fn dirichlet_set(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn interior_vertices(&self) -> &[usize] {
        &self.interior
    }

    pub fn dof_of_vertex(&self, v: usize) -> Option<usize> {
        self.dof_of_vertex[v]
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        match &self.solver {
            Solver::Empty => Vec::new(),
            Solver::Dense(ch) => ch.solve(&DVector::from_column_slice(b)).as_slice().to_vec(),
            Solver::Envelope(ch) => ch.solve(b),
        }
    }

    /// Solves `M x = b` on interior dofs, refining once if the residual is above 1e-12.
    pub fn solve_interior(&self, b: &[f64]) -> Result<Vec<f64>, FemError> {
        let mut x = self.raw_solve(b);
        let nb = norm(b);
        if nb == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        for _ in 0..2 {
            let r: Vec<f64> = b.iter().zip(self.stiffness.matvec(&x)).map(|(p, q)| p - q).collect();
            if norm(&r) <= 1e-12 * nb {
                return Ok(x);
            }
            let dx = self.raw_solve(&r);
            for (a, d) in x.iter_mut().zip(dx) {
                *a += d;
            }
        }
        let r: Vec<f64> = b.iter().zip(self.stiffness.matvec(&x)).map(|(p, q)| p - q).collect();
        if !(norm(&r) <= 1e-10 * nb) {
            return Err(FemError::SingularSystem);
        }
        Ok(x)
    }

    fn check(&self, f: &Field, nodes: usize, what: &str) -> Result<(), FemError> {
        if f.nodes() != nodes || f.channels() != 1 {
            return Err(FemError::Shape(format!(
                "{what} must be {nodes}x1, got {}x{}",
                f.nodes(),
                f.channels()
            )));
        }
        Ok(())
    }

    /// Maps a P0 source on the cells to the P1 solution on all vertices.
    pub fn solve(&self, a: &Field) -> Result<Field, FemError> {
        self.check(a, self.n_cells, "source")?;
        let load = self.load_map.matvec(a.values());
        let b: Vec<f64> = self.interior.iter().map(|&v| load[v]).collect();
        let x = self.solve_interior(&b)?;
        let mut u = vec![0.0; self.n_vertices];
        for (&v, xv) in self.interior.iter().zip(x) {
            u[v] = xv;
        }
        Ok(Field::scalar(u))
    }

    /// Adjoint of [`Self::solve`]: `Q^T M^{-1} w` with boundary entries of `w` ignored.
    pub fn vjp(&self, upstream: &Field) -> Result<Field, FemError> {
        self.check(upstream, self.n_vertices, "upstream")?;
        let b: Vec<f64> = self.interior.iter().map(|&v| upstream.values()[v]).collect();
        let z = self.solve_interior(&b)?;
        let mut full = vec![0.0; self.n_vertices];
        for (&v, zv) in self.interior.iter().zip(z) {
            full[v] = zv;
        }
        Ok(Field::scalar(self.load_map.matvec_transpose(&full)))
    }
}

pub fn poisson_solve(system: &PoissonSystem, a: &Field) -> Result<Field, FemError> {
    system.solve(a)
}

pub fn poisson_vjp(system: &PoissonSystem, upstream: &Field) -> Result<Field, FemError> {
    system.vjp(upstream)
}

/// `L2` distance between a P1 function and `exact`, by a degree-5 seven-point rule per triangle.
pub fn p1_l2_error(mesh: &TriMesh, u: &[f64], exact: impl Fn(Point) -> f64) -> f64 {
    const A1: f64 = 0.059_715_871_789_770;
    const B1: f64 = 0.470_142_064_105_115;
    const A2: f64 = 0.797_426_985_353_087;
    const B2: f64 = 0.101_286_507_323_456;
    const W0: f64 = 0.225;
    const W1: f64 = 0.132_394_152_788_506;
    const W2: f64 = 0.125_939_180_544_827;
    let rule: [([f64; 3], f64); 7] = [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], W0),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ];
    let mut total = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = mesh.triangle_points(t);
        let area = mesh.area(t);
        for (l, w) in rule {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            let uh = l[0] * u[tri[0]] + l[1] * u[tri[1]] + l[2] * u[tri[2]];
            total += w * area * (uh - exact(x)).powi(2);
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{mask_cells, triangulate_unit_square};
    use rand::Rng;
    use std::f64::consts::PI;

    fn source(mesh: &TriMesh) -> Field {
        Field::scalar(
            mesh.centroids()
                .iter()
                .map(|c| 2.0 * PI * PI * (PI * c[0]).sin() * (PI * c[1]).sin())
                .collect(),
        )
    }

    #[test]
    fn reference_element() {
        let k = element_stiffness([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
        assert!(element_stiffness([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
    }

    #[test]
    fn element_rows_sum_to_zero() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..100 {
            let p: [Point; 3] = std::array::from_fn(|_| [rng.random::<f64>(), rng.random::<f64>()]);
            if let Ok(k) = element_stiffness(p) {
                for row in k {
                    let s: f64 = row.iter().sum();
                    let m = row.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    assert!(s.abs() <= 1e-12 * m.max(1.0));
                }
            }
        }
    }

    #[test]
    fn load_map_columns_sum_to_area() {
        let mesh = triangulate_unit_square(5, 3).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        let ones = vec![1.0; sys.n_vertices()];
        let per_cell = sys.load_map().matvec_transpose(&ones);
        for (t, s) in per_cell.iter().enumerate() {
            assert!((s - mesh.area(t)).abs() < 1e-15);
        }
        assert!(sys.stiffness().is_symmetric(1e-14));
    }

    #[test]
    fn zero_source_zero_solution() {
        let mesh = triangulate_unit_square(4, 4).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        let u = sys.solve(&Field::zeros(mesh.triangles().len(), 1)).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        let g = sys.vjp(&Field::zeros(mesh.vertices().len(), 1)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_stays_zero_and_solution_is_symmetric() {
        let mesh = triangulate_unit_square(12, 12).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        // x <-> y symmetric source; the diagonal split is symmetric under the swap
        let a = Field::scalar(mesh.centroids().iter().map(|c| (c[0] * c[1]).exp() + c[0] + c[1]).collect());
        let u = sys.solve(&a).unwrap();
        for &b in sys.dirichlet_set() {
            assert_eq!(u.values()[b], 0.0);
        }
        for j in 0..=12 {
            for i in 0..=12 {
                let d = u.values()[j * 13 + i] - u.values()[i * 13 + j];
                assert!(d.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn manufactured_solution_converges_quadratically() {
        let exact = |p: Point| (PI * p[0]).sin() * (PI * p[1]).sin();
        let errs: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&n| {
                let mesh = triangulate_unit_square(n, n).unwrap();
                let sys = assemble_poisson(&mesh).unwrap();
                let u = sys.solve(&source(&mesh)).unwrap();
                p1_l2_error(&mesh, u.values(), exact)
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((1.8..=2.2).contains(&order), "order {order} from {errs:?}");
        }
    }

    #[test]
    fn dense_and_envelope_solvers_agree() {
        // 24x24 has 529 interior dofs and takes the envelope path
        let mesh = triangulate_unit_square(24, 24).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        assert!(matches!(sys.solver, Solver::Envelope(_)));
        let u = sys.solve(&source(&mesh)).unwrap();
        let n = sys.interior_vertices().len();
        let mut d = DMatrix::zeros(n, n);
        for r in 0..n {
            for (c, v) in sys.stiffness().row(r) {
                d[(r, c)] = v;
            }
        }
        let load = sys.load_map().matvec(source(&mesh).values());
        let b = DVector::from_iterator(n, sys.interior_vertices().iter().map(|&v| load[v]));
        let x = d.cholesky().unwrap().solve(&b);
        for (k, &v) in sys.interior_vertices().iter().enumerate() {
            assert!((u.values()[v] - x[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity() {
        let mesh = mask_cells(&triangulate_unit_square(10, 10).unwrap(), |p| p[0] < 0.5 || p[1] < 0.5).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        let mut rng = crate::rng::seeded(3);
        for _ in 0..5 {
            let a = Field::scalar((0..sys.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let w = Field::scalar((0..sys.n_vertices()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let lhs = sys.solve(&a).unwrap().dot(&w);
            let rhs = a.dot(&sys.vjp(&w).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn misfit_gradient_matches_finite_differences() {
        let mesh = triangulate_unit_square(2, 2).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        let mut rng = crate::rng::seeded(4);
        let a = Field::scalar((0..8).map(|_| rng.random_range(0.5..2.0)).collect());
        let y = Field::scalar((0..9).map(|_| rng.random_range(-0.1..0.1)).collect());
        let misfit = |a: &Field| 0.5 * sys.solve(a).unwrap().sub(&y).norm().powi(2);
        let grad = sys.vjp(&sys.solve(&a).unwrap().sub(&y)).unwrap();
        let eps = 1e-5;
        for k in 0..8 {
            let mut p = a.clone();
            let mut m = a.clone();
            p.values_mut()[k] += eps;
            m.values_mut()[k] -= eps;
            let fd = (misfit(&p) - misfit(&m)) / (2.0 * eps);
            let g = grad.values()[k];
            assert!((fd - g).abs() <= 1e-6 * fd.abs().max(g.abs()), "{k}: {fd} vs {g}");
        }
    }

    #[test]
    fn shape_errors() {
        let mesh = triangulate_unit_square(2, 2).unwrap();
        let sys = assemble_poisson(&mesh).unwrap();
        assert!(sys.solve(&Field::zeros(9, 1)).is_err());
        assert!(sys.vjp(&Field::zeros(8, 1)).is_err());
    }
}
