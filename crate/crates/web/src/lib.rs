//! Browser bindings: draw a Gaussian random field or a blob conductivity field on a
//! triangulated domain, smooth it with an FEM convolution, or solve a Poisson problem with
//! it as the source.

use femdiff::data::{gaussian_blob_field, BlobParams};
use femdiff::fem::{assemble_poisson, build_neighbor_table, fem_conv_forward, FemConvFilter, PoissonSystem};
use femdiff::mesh::{dual_graph, shaped_grid, DomainShape, DualGraph, TriMesh};
use femdiff::randfield::{build_covariance, CovarianceFactor, DEFAULT_JITTER};
use femdiff::rng::stream;
use femdiff::Field;
use wasm_bindgen::prelude::*;

/// Mesh, covariance and Poisson system for one domain; values live on triangles.
pub struct Scene {
    mesh: TriMesh,
    graph: DualGraph,
    shape: DomainShape,
    factor: CovarianceFactor,
    poisson: PoissonSystem,
}

impl Scene {
    pub fn new(shape: &str, n: usize, length_scale: f64) -> Result<Self, String> {
        let shape: DomainShape = shape.parse()?;
        let mesh = shaped_grid(shape, n, n).map_err(|e| e.to_string())?;
        let graph = dual_graph(&mesh);
        let factor = build_covariance(&graph.positions, length_scale, DEFAULT_JITTER).map_err(|e| e.to_string())?;
        let poisson = assemble_poisson(&mesh).map_err(|e| e.to_string())?;
        Ok(Self {
            mesh,
            graph,
            shape,
            factor,
            poisson,
        })
    }

    pub fn cells(&self) -> usize {
        self.graph.node_count()
    }

    /// `x0 y0 x1 y1 x2 y2` per triangle.
    pub fn triangle_coords(&self) -> Vec<f64> {
        (0..self.mesh.triangles().len())
            .flat_map(|t| self.mesh.triangle_points(t).into_iter().flatten())
            .collect()
    }

    pub fn grf(&self, seed: u32) -> Vec<f64> {
        self.factor.sample(&mut stream(u64::from(seed), "grf", 0), 1).into_values()
    }

    pub fn blobs(&self, seed: u32) -> Result<Vec<f64>, String> {
        let mut rng = stream(u64::from(seed), "data", 0);
        gaussian_blob_field(&self.graph, &BlobParams::default(), self.shape, &mut rng)
            .map(Field::into_values)
            .map_err(|e| e.to_string())
    }

    /// Local mean over the square patch of half-width `radius` around each cell.
    pub fn smooth(&self, values: &[f64], radius: f64) -> Result<Vec<f64>, String> {
        let field = self.field(values)?;
        let table = build_neighbor_table(&self.graph.positions, radius).map_err(|e| e.to_string())?;
        let filter = FemConvFilter::constant(1, 1, 3, radius, 1.0).map_err(|e| e.to_string())?;
        fem_conv_forward(&field, &filter, &table)
            .map(Field::into_values)
            .map_err(|e| e.to_string())
    }

    /// Solves `-Δu = values` with zero boundary data and averages `u` onto the cells.
    pub fn poisson(&self, values: &[f64]) -> Result<Vec<f64>, String> {
        let u = self.poisson.solve(&self.field(values)?).map_err(|e| e.to_string())?;
        Ok(self
            .mesh
            .triangles()
            .iter()
            .map(|t| t.iter().map(|&v| u.values()[v]).sum::<f64>() / 3.0)
            .collect())
    }

    fn field(&self, values: &[f64]) -> Result<Field, String> {
        if values.len() != self.cells() {
            return Err(format!("expected {} cell values, got {}", self.cells(), values.len()));
        }
        Ok(Field::scalar(values.to_vec()))
    }
}

#[wasm_bindgen]
pub struct Demo(Scene);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(shape: &str, n: usize, length_scale: f64) -> Result<Demo, JsError> {
        Scene::new(shape, n, length_scale).map(Demo).map_err(|e| JsError::new(&e))
    }

    pub fn cells(&self) -> usize {
        self.0.cells()
    }

    #[wasm_bindgen(js_name = triangleCoords)]
    pub fn triangle_coords(&self) -> Vec<f64> {
        self.0.triangle_coords()
    }

    pub fn grf(&self, seed: u32) -> Vec<f64> {
        self.0.grf(seed)
    }

    pub fn blobs(&self, seed: u32) -> Result<Vec<f64>, JsError> {
        self.0.blobs(seed).map_err(|e| JsError::new(&e))
    }

    pub fn smooth(&self, values: &[f64], radius: f64) -> Result<Vec<f64>, JsError> {
        self.0.smooth(values, radius).map_err(|e| JsError::new(&e))
    }

    pub fn poisson(&self, values: &[f64]) -> Result<Vec<f64>, JsError> {
        self.0.poisson(values).map_err(|e| JsError::new(&e))
    }
}
