//! Multi-hop node sequence sampling.
//!
//! Each node's sequence starts with the node itself followed by its BFS
//! layers 1..=k, i.e. the nodes first reachable by walks of length i over the
//! original adjacency. Sequences are cut at `L` entries, possibly mid-layer,
//! and padded with the sentinel id 0 under a false mask.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const PAD_ID: usize = 0;

/// Ordering of nodes within one BFS layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerOrder {
    #[default]
    Ascending,
    /// Seeded shuffle, for ablations.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSequenceBatch {
    indices: Vec<usize>,
    mask: Vec<bool>,
    lengths: Vec<usize>,
    depth_k: usize,
    max_len: usize,
}

impl NodeSequenceBatch {
    pub fn num_nodes(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn depth(&self) -> usize {
        self.depth_k
    }

    /// Padded `N x L` node ids, row-major.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `N x L` validity mask, row-major.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// The unpadded sequence of node `v`.
    pub fn row(&self, v: usize) -> &[usize] {
        &self.indices[v * self.max_len..v * self.max_len + self.lengths[v]]
    }

    /// Node id at position `pos` of every row (padding included).
    pub fn column(&self, pos: usize) -> Vec<usize> {
        (0..self.num_nodes())
            .map(|v| self.indices[v * self.max_len + pos])
            .collect()
    }

    pub fn mask_column(&self, pos: usize) -> Vec<bool> {
        (0..self.num_nodes())
            .map(|v| self.mask[v * self.max_len + pos])
            .collect()
    }

    /// One line per node: `<v>: <id,id,...> | <mask bits>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for v in 0..self.num_nodes() {
            let ids = &self.indices[v * self.max_len..(v + 1) * self.max_len];
            let bits = &self.mask[v * self.max_len..(v + 1) * self.max_len];
            let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
            let bits: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(out, "{v}: {} | {bits}", ids.join(",")).unwrap();
        }
        out
    }
}

pub fn sample_sequences(g: &Graph, k: usize, max_len: usize) -> Result<NodeSequenceBatch> {
    sample_sequences_with(g, k, max_len, LayerOrder::Ascending)
}

pub fn sample_sequences_with(
    g: &Graph,
    k: usize,
    max_len: usize,
    order: LayerOrder,
) -> Result<NodeSequenceBatch> {
    if max_len == 0 {
        return Err(Error::Validation("maximum sequence length must be >= 1".into()));
    }
    let n = g.num_nodes();
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![usize::MAX; n],
            |stamp, v| bfs_sequence(g, v, k, max_len, order, stamp),
        )
        .collect();

    let mut indices = vec![PAD_ID; n * max_len];
    let mut mask = vec![false; n * max_len];
    let mut lengths = Vec::with_capacity(n);
    for (v, row) in rows.iter().enumerate() {
        indices[v * max_len..v * max_len + row.len()].copy_from_slice(row);
        mask[v * max_len..v * max_len + row.len()].fill(true);
        lengths.push(row.len());
    }
    Ok(NodeSequenceBatch {
        indices,
        mask,
        lengths,
        depth_k: k,
        max_len,
    })
}

/// `stamp[u] == v` marks `u` as already placed in the sequence of `v`.
fn bfs_sequence(
    g: &Graph,
    v: usize,
    k: usize,
    max_len: usize,
    order: LayerOrder,
    stamp: &mut [usize],
) -> Vec<usize> {
    let mut seq = vec![v];
    stamp[v] = v;
    let mut frontier = vec![v];
    let mut rng = match order {
        LayerOrder::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed ^ (v as u64).rotate_left(32))),
        LayerOrder::Ascending => None,
    };
    for _ in 0..k {
        if seq.len() >= max_len || frontier.is_empty() {
            break;
        }
        let mut next = Vec::new();
        for &w in &frontier {
            for &u in g.neighbors(w) {
                if stamp[u] != v {
                    stamp[u] = v;
                    next.push(u);
                }
            }
        }
        next.sort_unstable();
        if let Some(rng) = rng.as_mut() {
            next.shuffle(rng);
        }
        let room = max_len - seq.len();
        seq.extend(next.iter().take(room));
        frontier = next;
    }
    seq
}

/// Shortest-path distance from `v` to `u` if it is at most `k`.
pub fn hop_of(g: &Graph, v: usize, u: usize, k: usize) -> Option<usize> {
    if v == u {
        return Some(0);
    }
    let mut seen = vec![false; g.num_nodes()];
    seen[v] = true;
    let mut frontier = vec![v];
    for depth in 1..=k {
        let mut next = Vec::new();
        for &w in &frontier {
            for &x in g.neighbors(w) {
                if x == u {
                    return Some(depth);
                }
                if !seen[x] {
                    seen[x] = true;
                    next.push(x);
                }
            }
        }
        if next.is_empty() {
            return None;
        }
        frontier = next;
    }
    None
}
