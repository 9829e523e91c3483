//! Graph data model, dataset ingestion, split management, adjacency
//! normalization and homophily analytics.

mod convert;
mod io;
mod splits;
pub mod synthetic;

use rayon::prelude::*;

pub use convert::{convert_geom_gcn, ConvertOptions};
pub use io::{load_dataset, write_dataset, write_id_map, DatasetPaths};
pub use splits::{generate_splits, load_splits, write_splits, SplitSet, NUM_SPLITS};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Undirected, unweighted node-labelled graph with dense features.
///
/// Node ids are dense in `[0, N)`; the ids found in the source files are kept
/// in [`Graph::original_ids`]. Self-loops read from input are stored apart from
/// the edge set and never count as neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    self_loops: Vec<usize>,
    original_ids: Vec<u64>,
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
}

impl Graph {
    /// Builds a graph whose original ids are `0..N`.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::from_parts(ids, features, labels, edges)
    }

    pub fn from_parts(
        original_ids: Vec<u64>,
        features: Tensor,
        labels: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        if features.rank() != 2 || features.shape()[0] != n || features.shape()[1] == 0 {
            return Err(Error::Validation(format!(
                "feature matrix {:?} does not match {n} nodes",
                features.shape()
            )));
        }
        if original_ids.len() != n {
            return Err(Error::Validation("original id list length differs from N".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);

        let mut pairs = Vec::new();
        let mut self_loops = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Reference(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            if u == v {
                self_loops.push(u);
            } else {
                pairs.push((u.min(v), u.max(v)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        self_loops.sort_unstable();
        self_loops.dedup();

        let mut degree = vec![0usize; n];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut adjacency = vec![0usize; offsets[n]];
        for &(u, v) in &pairs {
            adjacency[fill[u]] = v;
            fill[u] += 1;
            adjacency[fill[v]] = u;
            fill[v] += 1;
        }
        for v in 0..n {
            adjacency[offsets[v]..offsets[v + 1]].sort_unstable();
        }

        Ok(Graph {
            features,
            labels,
            num_classes,
            edges: pairs,
            self_loops,
            original_ids,
            offsets,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of distinct undirected edges, self-loops excluded.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn self_loops(&self) -> &[usize] {
        &self.self_loops
    }

    pub fn original_ids(&self) -> &[u64] {
        &self.original_ids
    }

    /// Sorted 1-hop neighbours of `v`, excluding `v` itself.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Same topology and features with labels remapped by `f`.
    pub fn relabeled(&self, f: impl Fn(usize) -> usize) -> Result<Self> {
        let labels = self.labels.iter().map(|&y| f(y)).collect();
        let edges = self
            .edges
            .iter()
            .copied()
            .chain(self.self_loops.iter().map(|&v| (v, v)));
        Graph::from_parts(self.original_ids.clone(), self.features.clone(), labels, edges)
    }

    /// Same graph with the edge set replaced.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Graph::from_parts(
            self.original_ids.clone(),
            self.features.clone(),
            self.labels.clone(),
            edges,
        )
    }
}

/// Homophily ratio together with the number of isolated nodes, which
/// contribute zero to the average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homophily {
    pub ratio: f64,
    pub isolated: usize,
}

/// Average fraction of each node's neighbours that share its label.
/// Self-loops are not neighbours here.
pub fn homophily(g: &Graph) -> Homophily {
    let mut total = 0.0;
    let mut isolated = 0;
    for v in 0..g.num_nodes() {
        let nbrs = g.neighbors(v);
        if nbrs.is_empty() {
            isolated += 1;
            continue;
        }
        let same = nbrs.iter().filter(|&&u| g.labels[u] == g.labels[v]).count();
        total += same as f64 / nbrs.len() as f64;
    }
    if isolated > 0 {
        log::warn!("{isolated} isolated node(s) contribute 0 to the homophily ratio");
    }
    Homophily {
        ratio: total / g.num_nodes() as f64,
        isolated,
    }
}

pub fn homophily_ratio(g: &Graph) -> f64 {
    homophily(g).ratio
}

/// Symmetrically normalised adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`,
/// stored row-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt())
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(2 * g.num_edges() + n);
    let mut weights = Vec::with_capacity(cols.capacity());
    offsets.push(0);
    for u in 0..n {
        let nbrs = g.neighbors(u);
        let split = nbrs.partition_point(|&v| v < u);
        let row = nbrs[..split]
            .iter()
            .copied()
            .chain(std::iter::once(u))
            .chain(nbrs[split..].iter().copied());
        for v in row {
            cols.push(v);
            weights.push(inv_sqrt[u] * inv_sqrt[v]);
        }
        offsets.push(cols.len());
    }
    NormalizedAdjacency {
        offsets,
        cols,
        weights,
    }
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(u, v, weight)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            (self.offsets[u]..self.offsets[u + 1]).map(move |i| (u, self.cols[i], self.weights[i]))
        })
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        let row = &self.cols[self.offsets[u]..self.offsets[u + 1]];
        row.binary_search(&v)
            .ok()
            .map(|i| self.weights[self.offsets[u] + i])
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.num_nodes();
        let mut out = vec![0.0; n * n];
        for (u, v, w) in self.entries() {
            out[u * n + v] = w;
        }
        out
    }

    /// Sparse product with a row-major `[N, width]` matrix.
    pub fn apply(&self, x: &[f64], width: usize) -> Vec<f64> {
        let n = self.num_nodes();
        let mut out = vec![0.0; n * width];
        if width == 0 {
            return out;
        }
        let row = |(u, dst): (usize, &mut [f64])| {
            for i in self.offsets[u]..self.offsets[u + 1] {
                let (v, w) = (self.cols[i], self.weights[i]);
                for (o, xv) in dst.iter_mut().zip(&x[v * width..(v + 1) * width]) {
                    *o += w * xv;
                }
            }
        };
        if self.nnz() * width > 1 << 16 {
            out.par_chunks_mut(width).enumerate().for_each(row);
        } else {
            out.chunks_mut(width).enumerate().for_each(row);
        }
        out
    }

    /// Product with the transpose; the matrix is symmetric so this equals
    /// [`NormalizedAdjacency::apply`].
    pub fn apply_transpose(&self, x: &[f64], width: usize) -> Vec<f64> {
        self.apply(x, width)
    }
}
