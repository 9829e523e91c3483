//! Seeded synthetic graphs for tests, benchmarks and smoke runs.
//!
//! Classes come in pairs (0 with 1, 2 with 3, ...). With probability
//! `intra_class` an edge joins two nodes of the same class; otherwise it joins
//! a node to the partner class. Low `intra_class` therefore gives a
//! heterophilic graph whose two-hop neighbourhoods are mostly same-class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    /// Edges drawn per node; the realised mean degree is about twice this.
    pub edges_per_node: usize,
    pub intra_class: f64,
    /// Scale of the class prototype relative to unit Gaussian noise.
    pub feature_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 120,
            classes: 4,
            features: 16,
            edges_per_node: 3,
            intra_class: 0.1,
            feature_signal: 0.6,
            seed: 0,
        }
    }
}

fn partner(class: usize, classes: usize) -> usize {
    let p = class ^ 1;
    if p < classes {
        p
    } else {
        class
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.classes.max(1);
    let labels: Vec<usize> = (0..spec.nodes).map(|v| v % classes).collect();
    let mut members = vec![Vec::new(); classes];
    for (v, &y) in labels.iter().enumerate() {
        members[y].push(v);
    }

    let mut edges = Vec::with_capacity(spec.nodes * spec.edges_per_node);
    for v in 0..spec.nodes {
        for _ in 0..spec.edges_per_node {
            let target_class = if rng.random::<f64>() < spec.intra_class {
                labels[v]
            } else {
                partner(labels[v], classes)
            };
            let pool = &members[target_class];
            let u = pool[rng.random_range(0..pool.len())];
            if u != v {
                edges.push((v, u));
            }
        }
    }

    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..spec.features)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.nodes * spec.features);
    for &y in &labels {
        for j in 0..spec.features {
            data.push(spec.feature_signal * prototypes[y][j] + gaussian(&mut rng));
        }
    }
    Graph::new(Tensor::new(vec![spec.nodes, spec.features], data)?, labels, edges)
}

/// Two-class toy graph of `n` nodes where feature 0 alone separates the
/// classes and every edge is heterophilic.
pub fn separable_toy(n: usize) -> Result<Graph> {
    let labels: Vec<usize> = (0..n).map(|v| v % 2).collect();
    let mut data = Vec::with_capacity(n * 2);
    for (v, &y) in labels.iter().enumerate() {
        data.push(if y == 1 { 1.0 } else { -1.0 });
        data.push(((v * 37) % 11) as f64 / 11.0 - 0.5);
    }
    let edges = (0..n).map(|v| (v, (v + 1) % n));
    Graph::new(Tensor::new(vec![n, 2], data)?, labels, edges)
}
