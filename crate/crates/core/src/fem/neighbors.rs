use std::collections::HashMap;

use crate::mesh::Point;

use super::{FemError, PATCH_SLACK};

/// Closed L-infinity neighbourhoods of radius `r`, in CSR layout, with patch coordinates.
///
/// Each list is sorted by node index and contains the node itself.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    radius: f64,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    xi: Vec<[f64; 2]>,
}

impl NeighborTable {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Patch coordinates `(x_j - x_i) / r`, aligned with [`Self::neighbors`].
    pub fn xi(&self, i: usize) -> &[[f64; 2]] {
        &self.xi[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn total_entries(&self) -> usize {
        self.neighbors.len()
    }
}

/// Neighbour search by uniform spatial hashing with cell size slightly above `r`.
pub fn build_neighbor_table(positions: &[Point], radius: f64) -> Result<NeighborTable, FemError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(FemError::InvalidParameter(format!(
            "neighbour radius must be positive, got {radius}"
        )));
    }
    let lim = radius * (1.0 + PATCH_SLACK);
    let cell = lim * (1.0 + 1e-9);
    let key = |p: Point| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in positions.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut offsets = Vec::with_capacity(positions.len() + 1);
    let mut neighbors = Vec::new();
    let mut xi = Vec::new();
    offsets.push(0);
    let mut scratch = Vec::new();
    for &p in positions {
        let (cx, cy) = key(p);
        scratch.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        let q = positions[j];
                        if (q[0] - p[0]).abs() <= lim && (q[1] - p[1]).abs() <= lim {
                            scratch.push(j);
                        }
                    }
                }
            }
        }
        scratch.sort_unstable();
        for &j in &scratch {
            let q = positions[j];
            neighbors.push(j);
            xi.push([(q[0] - p[0]) / radius, (q[1] - p[1]) / radius]);
        }
        offsets.push(neighbors.len());
    }
    Ok(NeighborTable {
        radius,
        offsets,
        neighbors,
        xi,
    })
}
