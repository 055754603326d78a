//! Feature graphs over spots: exact KNN in embedding space, or a radius rule
//! on spatial coordinates. Both always contain every self-loop.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RADIUS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Knn,
    SpatialRadius,
}

/// Directed edge list; an edge `(src, dst)` means `src` is an in-neighbor of `dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    pub n_nodes: usize,
    /// Deduplicated and sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    pub kind: GraphKind,
    /// `k` for KNN graphs, `r` for radius graphs.
    pub param: f64,
}

/// In-neighbor lists in CSR layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborLists {
    /// Length `n + 1`; node `i`'s neighbors are `indices[offsets[i]..offsets[i + 1]]`.
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl NeighborLists {
    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn of(&self, node: usize) -> &[usize] {
        &self.indices[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Edge positions `offsets[node]..offsets[node + 1]`.
    pub fn range(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }
}

impl FeatureGraph {
    fn from_edges(n_nodes: usize, mut edges: Vec<(usize, usize)>, kind: GraphKind, param: f64) -> Self {
        edges.extend((0..n_nodes).map(|i| (i, i)));
        edges.sort_unstable();
        edges.dedup();
        Self {
            n_nodes,
            edges,
            kind,
            param,
        }
    }

    /// Builds a graph from an explicit edge list, adding self-loops.
    pub fn from_edge_list(n_nodes: usize, edges: Vec<(usize, usize)>, kind: GraphKind, param: f64) -> Result<Self> {
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n_nodes || d >= n_nodes) {
            return Err(Error::InvalidValue(format!(
                "edge ({s}, {d}) out of range for {n_nodes} nodes"
            )));
        }
        Ok(Self::from_edges(n_nodes, edges, kind, param))
    }

    pub fn neighbor_lists(&self) -> NeighborLists {
        neighbor_lists(self)
    }

    /// Writes the edge list as `src,dst` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("src,dst\n");
        for (s, d) in &self.edges {
            out.push_str(&format!("{s},{d}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn squared_distance<T: Scalar>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// For every node `i`, adds edges `j → i` from its `k` nearest other nodes.
///
/// Exact brute force; distance ties go to the smaller index.
pub fn build_knn_graph<T: Scalar>(embedding: ArrayView2<'_, T>, k: usize) -> Result<FeatureGraph> {
    let n = embedding.nrows();
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("embedding contains non-finite values".into()));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut candidates: Vec<(T, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        let row = embedding.row(i);
        candidates.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(row, embedding.row(j)), j)),
        );
        let by_distance = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if k > 0 && k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_distance);
        }
        candidates.truncate(k);
        edges.extend(candidates.iter().map(|&(_, j)| (j, i)));
    }
    Ok(FeatureGraph::from_edges(n, edges, GraphKind::Knn, k as f64))
}

/// Undirected radius graph: `{i, j}` is an edge iff `dist(i, j) < r`.
pub fn build_spatial_graph<T: Scalar>(coords: ArrayView2<'_, T>, r: f64) -> Result<FeatureGraph> {
    if !(r >= 0.0) {
        return Err(Error::InvalidValue(format!("radius must be non-negative, got {r}")));
    }
    let n = coords.nrows();
    let r2 = T::of(r * r);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if squared_distance(coords.row(i), coords.row(j)) < r2 {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    Ok(FeatureGraph::from_edges(n, edges, GraphKind::SpatialRadius, r))
}

pub fn neighbor_lists(g: &FeatureGraph) -> NeighborLists {
    let mut counts = vec![0usize; g.n_nodes + 1];
    for &(_, dst) in &g.edges {
        counts[dst + 1] += 1;
    }
    for i in 0..g.n_nodes {
        counts[i + 1] += counts[i];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut indices = vec![0usize; g.edges.len()];
    for &(src, dst) in &g.edges {
        indices[fill[dst]] = src;
        fill[dst] += 1;
    }
    for i in 0..g.n_nodes {
        indices[offsets[i]..offsets[i + 1]].sort_unstable();
    }
    NeighborLists { offsets, indices }
}
