//! Fixtures shared by the criterion benchmarks in `benches/`.

use gpnn_core::autodiff::Tensor;
use gpnn_core::graph::synthetic::{generate, SyntheticSpec};
use gpnn_core::Graph;

/// Heterophilic synthetic graph roughly the size of the WebKB sets.
pub fn webkb_sized(nodes: usize) -> Graph {
    generate(&SyntheticSpec {
        nodes,
        classes: 5,
        features: 64,
        edges_per_node: 2,
        seed: 7,
        ..Default::default()
    })
    .expect("synthetic graph")
}

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let x = (i ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
            x as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
