//! Triangulations of 2D domains and the graphs the score network runs on.
//!
//! A [`TriMesh`] is the geometric substrate. Fields live either on its triangles
//! (P0, nodes at centroids, see [`dual_graph`]) or on its vertices (P1, see [`vertex_graph`]).
//! [`MeshHierarchy`] chains several graphs of the same domain with 1-NN pooling maps.

mod hierarchy;
mod io;
mod shapes;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hierarchy::{build_hierarchy, MeshHierarchy};
pub use io::{load_mesh, read_mesh, save_mesh, write_mesh};
pub use shapes::DomainShape;

pub type Point = [f64; 2];

pub const MIN_AREA: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("grid resolution must be at least 1x1, got {nx}x{ny}")]
    BadResolution { nx: usize, ny: usize },
    #[error("triangle {tri} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        tri: usize,
        index: usize,
        count: usize,
    },
    #[error("triangle {tri} has non-positive signed area {area:e}")]
    NonPositiveArea { tri: usize, area: f64 },
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("boundary vertex {0} is out of range")]
    BadBoundaryVertex(usize),
    #[error("mask keeps no triangle")]
    EmptyDomain,
    #[error("masked domain splits into {0} edge-connected components")]
    DisconnectedDomain(usize),
    #[error("graph has no edges")]
    NoEdges,
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counter-clockwise triangulation of a planar domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<usize>,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn sorted_edge(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Maps each undirected mesh edge to the triangles containing it.
fn edge_triangles(triangles: &[[usize; 3]]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            map.entry(sorted_edge(tri[k], tri[(k + 1) % 3]))
                .or_default()
                .push(t);
        }
    }
    map
}

impl TriMesh {
    /// Validates the triangulation. `boundary = None` derives boundary vertices from the
    /// edges that belong to exactly one triangle.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: Option<Vec<usize>>,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange {
                        tri: t,
                        index: v,
                        count: n,
                    });
                }
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { tri: t, area });
            }
        }
        let edges = edge_triangles(&triangles);
        if let Some((&(a, b), _)) = edges.iter().find(|(_, ts)| ts.len() > 2) {
            return Err(MeshError::NonManifoldEdge(a, b));
        }
        let boundary = match boundary {
            Some(mut b) => {
                if let Some(&v) = b.iter().find(|&&v| v >= n) {
                    return Err(MeshError::BadBoundaryVertex(v));
                }
                b.sort_unstable();
                b.dedup();
                b
            }
            None => {
                let set: BTreeSet<usize> = edges
                    .iter()
                    .filter(|(_, ts)| ts.len() == 1)
                    .flat_map(|(&(a, b), _)| [a, b])
                    .collect();
                set.into_iter().collect()
            }
        };
        Ok(Self {
            vertices,
            triangles,
            boundary,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Sorted indices of vertices on the domain boundary.
    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary.binary_search(&v).is_ok()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.triangle_points(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn centroids(&self) -> Vec<Point> {
        (0..self.triangles.len()).map(|t| self.centroid(t)).collect()
    }

    /// Number of edges shared by two triangles.
    pub fn interior_edge_count(&self) -> usize {
        edge_triangles(&self.triangles)
            .values()
            .filter(|ts| ts.len() == 2)
            .count()
    }

    pub fn min_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.area(t))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Regular `nx x ny` grid on `[0,1]^2`, each cell split along its SW-NE diagonal.
///
/// Vertex `(i, j)` has index `j * (nx + 1) + i`; cell `(i, j)` owns triangles
/// `2 (j nx + i)` (lower-right) and `2 (j nx + i) + 1` (upper-left).
pub fn triangulate_unit_square(nx: usize, ny: usize) -> Result<TriMesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::BadResolution { nx, ny });
    }
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([i as f64 / nx as f64, j as f64 / ny as f64]);
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (sw, se, nw, ne) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([sw, se, ne]);
            triangles.push([sw, ne, nw]);
        }
    }
    TriMesh::new(vertices, triangles, None)
}

/// Keeps the triangles whose centroid satisfies `keep`, compacting the vertex list.
pub fn mask_cells(mesh: &TriMesh, keep: impl Fn(Point) -> bool) -> Result<TriMesh, MeshError> {
    let kept: Vec<usize> = (0..mesh.triangles.len())
        .filter(|&t| keep(mesh.centroid(t)))
        .collect();
    if kept.is_empty() {
        return Err(MeshError::EmptyDomain);
    }
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut used: Vec<usize> = kept.iter().flat_map(|&t| mesh.triangles[t]).collect();
    used.sort_unstable();
    used.dedup();
    let mut vertices = Vec::with_capacity(used.len());
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new;
        vertices.push(mesh.vertices[old]);
    }
    let triangles: Vec<[usize; 3]> = kept
        .iter()
        .map(|&t| {
            let [a, b, c] = mesh.triangles[t];
            [remap[a], remap[b], remap[c]]
        })
        .collect();
    let out = TriMesh::new(vertices, triangles, None)?;
    let components = dual_graph(&out).component_count();
    if components > 1 {
        return Err(MeshError::DisconnectedDomain(components));
    }
    Ok(out)
}

/// Structured grid on `[0,1]^2` restricted to a domain shape.
pub fn shaped_grid(shape: DomainShape, nx: usize, ny: usize) -> Result<TriMesh, MeshError> {
    let mesh = triangulate_unit_square(nx, ny)?;
    if shape == DomainShape::Square {
        return Ok(mesh);
    }
    mask_cells(&mesh, |p| shape.contains(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// One node per triangle, at its centroid.
    P0Centroid,
    /// One node per mesh vertex.
    P1Vertex,
}

/// Simple undirected graph with node positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualGraph {
    pub positions: Vec<Point>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub kind: NodeKind,
}

impl DualGraph {
    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(i, j)| dist(self.positions[i], self.positions[j]))
            .collect()
    }

    fn component_count(&self) -> usize {
        let n = self.positions.len();
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// Same graph with nodes relabelled: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> DualGraph {
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| sorted_edge(inv[i], inv[j]))
            .collect();
        edges.sort_unstable();
        DualGraph {
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            edges,
            kind: self.kind,
        }
    }
}

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Centroid dual graph: triangles are nodes, edges join triangles sharing a mesh edge.
pub fn dual_graph(mesh: &TriMesh) -> DualGraph {
    let mut edges: Vec<(usize, usize)> = edge_triangles(&mesh.triangles)
        .values()
        .filter(|ts| ts.len() == 2)
        .map(|ts| sorted_edge(ts[0], ts[1]))
        .collect();
    edges.sort_unstable();
    DualGraph {
        positions: mesh.centroids(),
        edges,
        kind: NodeKind::P0Centroid,
    }
}

/// Vertex graph: mesh vertices are nodes, mesh edges are edges.
pub fn vertex_graph(mesh: &TriMesh) -> DualGraph {
    let edges: Vec<(usize, usize)> = edge_triangles(&mesh.triangles).into_keys().collect();
    DualGraph {
        positions: mesh.vertices.clone(),
        edges,
        kind: NodeKind::P1Vertex,
    }
}

/// Median Euclidean edge length; even counts average the two central order statistics.
pub fn median_edge_length(graph: &DualGraph) -> Result<f64, MeshError> {
    let mut lengths = graph.edge_lengths();
    if lengths.is_empty() {
        return Err(MeshError::NoEdges);
    }
    lengths.sort_by(f64::total_cmp);
    let n = lengths.len();
    Ok(if n % 2 == 1 {
        lengths[n / 2]
    } else {
        0.5 * (lengths[n / 2 - 1] + lengths[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn unit_square_counts() {
        for (nx, ny, tris, verts) in [(32, 32, 2048, 1089), (1, 1, 2, 4), (2, 1, 4, 6)] {
            let m = triangulate_unit_square(nx, ny).unwrap();
            assert_eq!(m.triangles().len(), tris);
            assert_eq!(m.vertices().len(), verts);
        }
        assert!(matches!(
            triangulate_unit_square(0, 3),
            Err(MeshError::BadResolution { .. })
        ));
    }

    #[test]
    fn unit_square_diagonal_and_boundary() {
        let m = triangulate_unit_square(1, 1).unwrap();
        // both triangles contain the SW (0) and NE (3) corners
        for tri in m.triangles() {
            assert!(tri.contains(&0) && tri.contains(&3));
        }
        let m = triangulate_unit_square(3, 2).unwrap();
        let expected: Vec<usize> = (0..m.vertices().len())
            .filter(|&v| {
                let [x, y] = m.vertices()[v];
                x == 0.0 || y == 0.0 || x == 1.0 || y == 1.0
            })
            .collect();
        assert_eq!(m.boundary_vertices(), &expected[..]);
        assert!(m.min_area() > 0.0);
    }

    #[test]
    fn validation_errors() {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            TriMesh::new(v.clone(), vec![[0, 1, 3]], None),
            Err(MeshError::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            TriMesh::new(v, vec![[0, 2, 1]], None),
            Err(MeshError::NonPositiveArea { .. })
        ));
        // three triangles on edge (0, 1)
        let r = TriMesh::new(
            vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.5], [-1.0, 0.5], [2.0, 0.5]],
            vec![[0, 2, 1], [0, 1, 3], [0, 4, 1]],
            None,
        );
        assert!(matches!(r, Err(MeshError::NonManifoldEdge(0, 1))));
    }

    #[test]
    fn mask_l_shape_and_hole() {
        let m = triangulate_unit_square(2, 2).unwrap();
        let l = mask_cells(&m, |p| !(p[0] > 0.5 && p[1] > 0.5)).unwrap();
        assert_eq!(l.triangles().len(), 6);
        assert_eq!(l.vertices().len(), 8);

        let m4 = triangulate_unit_square(4, 4).unwrap();
        let hole = mask_cells(&m4, |p| {
            !((0.25..0.75).contains(&p[0]) && (0.25..0.75).contains(&p[1]))
        })
        .unwrap();
        assert_eq!(hole.triangles().len(), 24);
        // inner ring of the hole is boundary too
        assert_eq!(hole.boundary_vertices().len(), 16 + 8);

        let same = mask_cells(&m4, |_| true).unwrap();
        assert_eq!(same, m4);
    }

    #[test]
    fn mask_errors() {
        let m = triangulate_unit_square(3, 3).unwrap();
        assert!(matches!(
            mask_cells(&m, |_| false),
            Err(MeshError::EmptyDomain)
        ));
        // left and right columns only
        let r = mask_cells(&m, |p| p[0] < 1.0 / 3.0 || p[0] > 2.0 / 3.0);
        assert!(matches!(r, Err(MeshError::DisconnectedDomain(2))));
    }

    #[test]
    fn dual_graph_examples() {
        let g = dual_graph(&triangulate_unit_square(1, 1).unwrap());
        assert_eq!((g.node_count(), g.edges.len()), (2, 1));
        let g = dual_graph(&triangulate_unit_square(32, 32).unwrap());
        assert_eq!(g.node_count(), 2048);
        let g = dual_graph(&triangulate_unit_square(2, 1).unwrap());
        // two diagonals plus the vertical edge shared by triangles 0 and 3
        assert_eq!(g.edges, vec![(0, 1), (0, 3), (2, 3)]);
    }

    #[test]
    fn vertex_graph_examples() {
        let g = vertex_graph(&triangulate_unit_square(1, 1).unwrap());
        assert_eq!((g.node_count(), g.edges.len()), (4, 5));
        let g = vertex_graph(&single_triangle());
        assert_eq!((g.node_count(), g.edges.len()), (3, 3));
        let g = vertex_graph(&triangulate_unit_square(2, 2).unwrap());
        assert_eq!((g.node_count(), g.edges.len()), (9, 16));
    }

    /// Brute-force census of shared edges by scanning all triangle pairs.
    fn shared_edge_census(mesh: &TriMesh) -> usize {
        let t = mesh.triangles();
        let mut count = 0;
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                let common = t[a].iter().filter(|v| t[b].contains(v)).count();
                if common == 2 {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn dual_edge_count_matches_census() {
        for n in 1..=8 {
            for m in [n, (n + 3) % 8 + 1] {
                let mesh = triangulate_unit_square(n, m).unwrap();
                let g = dual_graph(&mesh);
                assert_eq!(g.edges.len(), shared_edge_census(&mesh));
                assert_eq!(g.edges.len(), mesh.interior_edge_count());
            }
        }
        let hole = mask_cells(&triangulate_unit_square(6, 6).unwrap(), |p| {
            DomainShape::SquareWithHole.contains(p)
        })
        .unwrap();
        let g = dual_graph(&hole);
        assert_eq!(g.edges.len(), shared_edge_census(&hole));
        for &(i, j) in &g.edges {
            let common = hole.triangles()[i]
                .iter()
                .filter(|v| hole.triangles()[j].contains(v))
                .count();
            assert_eq!(common, 2);
        }
    }

    #[test]
    fn median_examples() {
        let g = DualGraph {
            positions: vec![[0.0, 0.0], [0.5, 0.0]],
            edges: vec![(0, 1)],
            kind: NodeKind::P1Vertex,
        };
        assert_eq!(median_edge_length(&g).unwrap(), 0.5);
        let g = DualGraph {
            positions: vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [6.0, 0.0]],
            edges: vec![(0, 1), (1, 2), (2, 3)],
            kind: NodeKind::P1Vertex,
        };
        assert_eq!(median_edge_length(&g).unwrap(), 2.0);
        let g = DualGraph {
            positions: vec![[0.0, 0.0]],
            edges: vec![],
            kind: NodeKind::P1Vertex,
        };
        assert!(matches!(median_edge_length(&g), Err(MeshError::NoEdges)));
    }

    #[test]
    fn median_of_4x4_dual_graph() {
        // Oracle: enumerate triangle pairs sharing two vertices, measure centroid distances.
        let mesh = triangulate_unit_square(4, 4).unwrap();
        let t = mesh.triangles();
        let mut lengths = Vec::new();
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                if t[a].iter().filter(|v| t[b].contains(v)).count() == 2 {
                    lengths.push(dist(mesh.centroid(a), mesh.centroid(b)));
                }
            }
        }
        lengths.sort_by(f64::total_cmp);
        let n = lengths.len();
        let oracle = if n % 2 == 1 {
            lengths[n / 2]
        } else {
            0.5 * (lengths[n / 2 - 1] + lengths[n / 2])
        };
        let got = median_edge_length(&dual_graph(&mesh)).unwrap();
        assert_eq!(got, oracle);
        // 16 diagonal edges of length sqrt(2)/12, 24 cross-cell edges of length sqrt(5)/12
        assert_eq!(n, 40);
        assert!((got - 5f64.sqrt() / 12.0).abs() < 1e-15);
    }
}
