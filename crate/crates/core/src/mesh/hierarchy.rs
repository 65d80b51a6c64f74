use serde::{Deserialize, Serialize};

use super::{dist, median_edge_length, DualGraph, MeshError};

/// Graphs of one domain from finest to coarsest, with 1-NN pooling maps between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshHierarchy {
    pub levels: Vec<DualGraph>,
    /// `pool_maps[l][i]` is the level `l + 1` node that fine node `i` of level `l` pools into.
    pub pool_maps: Vec<Vec<usize>>,
    /// `unpool_maps[l][c]` lists the level `l` nodes pooled into coarse node `c`, ascending.
    pub unpool_maps: Vec<Vec<Vec<usize>>>,
    pub median_edge: Vec<f64>,
    pub radii: Vec<f64>,
    pub mu: f64,
}

impl MeshHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(DualGraph::node_count).collect()
    }

    /// Averages a fine level-`l` field (row-major, `channels` wide) over each pre-image.
    pub fn pool_mean(&self, l: usize, fine: &[f64], channels: usize) -> Vec<f64> {
        let pre = &self.unpool_maps[l];
        let mut out = vec![0.0; pre.len() * channels];
        for (c, members) in pre.iter().enumerate() {
            let w = 1.0 / members.len() as f64;
            for &i in members {
                for k in 0..channels {
                    out[c * channels + k] += w * fine[i * channels + k];
                }
            }
        }
        out
    }

    /// Copies each coarse level-`l + 1` value to its pre-image.
    pub fn unpool(&self, l: usize, coarse: &[f64], channels: usize) -> Vec<f64> {
        let map = &self.pool_maps[l];
        let mut out = Vec::with_capacity(map.len() * channels);
        for &c in map {
            out.extend_from_slice(&coarse[c * channels..(c + 1) * channels]);
        }
        out
    }
}

fn nearest(points: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &q) in points.iter().enumerate() {
        let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        // strict comparison keeps the lowest index on ties
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Assigns every fine node to its nearest coarse node, then repairs orphaned coarse nodes
/// by taking their nearest fine node from a coarse node that can spare one.
fn assign(fine: &DualGraph, coarse: &DualGraph) -> Vec<usize> {
    let mut map: Vec<usize> = fine
        .positions
        .iter()
        .map(|&p| nearest(&coarse.positions, p))
        .collect();
    let mut counts = vec![0usize; coarse.node_count()];
    for &c in &map {
        counts[c] += 1;
    }
    for c in 0..coarse.node_count() {
        if counts[c] > 0 {
            continue;
        }
        let target = coarse.positions[c];
        let donor = (0..map.len())
            .filter(|&i| counts[map[i]] > 1)
            .min_by(|&a, &b| {
                dist(fine.positions[a], target)
                    .total_cmp(&dist(fine.positions[b], target))
                    .then(a.cmp(&b))
            })
            .expect("fine level has more nodes than coarse level");
        counts[map[donor]] -= 1;
        map[donor] = c;
        counts[c] = 1;
    }
    map
}

/// Builds a hierarchy from graphs ordered finest first, with radii `mu * median_edge`.
pub fn build_hierarchy(graphs: Vec<DualGraph>, mu: f64) -> Result<MeshHierarchy, MeshError> {
    if graphs.is_empty() {
        return Err(MeshError::InvalidHierarchy("no levels".into()));
    }
    if !(mu > 0.0) {
        return Err(MeshError::InvalidHierarchy(format!(
            "radius multiplier must be positive, got {mu}"
        )));
    }
    for (l, w) in graphs.windows(2).enumerate() {
        if w[1].node_count() >= w[0].node_count() {
            return Err(MeshError::InvalidHierarchy(format!(
                "level {} has {} nodes, level {} has {}; counts must strictly decrease",
                l,
                w[0].node_count(),
                l + 1,
                w[1].node_count()
            )));
        }
    }
    let mut pool_maps = Vec::new();
    let mut unpool_maps = Vec::new();
    for w in graphs.windows(2) {
        let map = assign(&w[0], &w[1]);
        let mut pre = vec![Vec::new(); w[1].node_count()];
        for (i, &c) in map.iter().enumerate() {
            pre[c].push(i);
        }
        pool_maps.push(map);
        unpool_maps.push(pre);
    }
    let median_edge = graphs
        .iter()
        .map(median_edge_length)
        .collect::<Result<Vec<_>, _>>()?;
    let radii = median_edge.iter().map(|d| mu * d).collect();
    Ok(MeshHierarchy {
        levels: graphs,
        pool_maps,
        unpool_maps,
        median_edge,
        radii,
        mu,
    })
}
