//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::sync::Arc;

use gpnn_core::autodiff::{Tape, Tensor, Var};
use gpnn_core::graph::{normalize_adjacency, Graph};
use gpnn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random simple graph on `n` nodes with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, classes: usize, features: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Graph::new(random_tensor(rng, &[n, features]), labels, edges).unwrap()
}

/// Sequence oracle from boolean powers of the dense adjacency: walks of
/// length i for i = 0..=k, each new node appended the first time a power
/// reaches it, ascending ids within a power, cut at `max_len`.
pub fn walk_reachability_rows(g: &Graph, k: usize, max_len: usize) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for &(u, v) in g.edges() {
        a[u][v] = true;
        a[v][u] = true;
    }
    let mut rows = Vec::with_capacity(n);
    for v in 0..n {
        // reach[u]: some walk of exactly the current length goes v -> u.
        let mut reach = vec![false; n];
        reach[v] = true;
        let mut seen = reach.clone();
        let mut row = vec![v];
        for _ in 1..=k {
            let mut next = vec![false; n];
            for w in 0..n {
                if reach[w] {
                    for u in 0..n {
                        next[u] |= a[w][u];
                    }
                }
            }
            for u in 0..n {
                if next[u] && !seen[u] {
                    seen[u] = true;
                    row.push(u);
                }
            }
            reach = next;
        }
        row.truncate(max_len);
        rows.push(row);
    }
    rows
}

pub type Scalarizer = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One randomly shaped instance of a kernel, reduced to a scalar through a
/// fixed random weighting so every output coordinate matters.
pub struct KernelCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub f: Scalarizer,
}

pub const KERNELS: [&str; 26] = [
    "matmul",
    "matmul_rank3",
    "add_broadcast",
    "mul_broadcast",
    "scale",
    "tanh",
    "relu",
    "sigmoid",
    "concat_last_axis",
    "slice_last",
    "gather_rows",
    "masked_softmax",
    "pick_per_row",
    "select_position",
    "stack",
    "sum_axis1",
    "reshape",
    "sum",
    "conv1d",
    "max_pool_over_positions",
    "mean_pool_over_positions",
    "dropout",
    "cross_entropy",
    "propagate",
    "additive_attention",
    "composite",
];

fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..rows * width).map(|_| rng.random::<f64>() < 0.6).collect();
    for r in 0..rows {
        let j = rng.random_range(0..width);
        mask[r * width + j] = true;
    }
    mask
}

pub fn kernel_case(name: &'static str, seed: u64) -> KernelCase {
    let mut rng = rng(seed);
    let (n, m, d, o) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let t = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s);
    let (leaves, f): (Vec<Tensor>, Scalarizer) = match name {
        "matmul" => {
            let w = t(&mut rng, &[n, o]);
            (
                vec![t(&mut rng, &[n, d]), t(&mut rng, &[d, o])],
                Box::new(move |tp, v| {
                    let y = tp.matmul(v[0], v[1])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "matmul_rank3" => {
            let w = t(&mut rng, &[n, m, o]);
            (
                vec![t(&mut rng, &[n, m, d]), t(&mut rng, &[d, o])],
                Box::new(move |tp, v| {
                    let y = tp.matmul(v[0], v[1])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "add_broadcast" | "mul_broadcast" => {
            let w = t(&mut rng, &[n, m, d]);
            let rhs_shapes = [vec![d], vec![m, d], vec![n, 1, d], vec![n, m, 1], vec![1]];
            let rhs = rhs_shapes[rng.random_range(0..rhs_shapes.len())].clone();
            let is_add = name == "add_broadcast";
            (
                vec![t(&mut rng, &[n, m, d]), t(&mut rng, &rhs)],
                Box::new(move |tp, v| {
                    let y = if is_add { tp.add(v[0], v[1])? } else { tp.mul(v[0], v[1])? };
                    weighted(tp, y, &w)
                }),
            )
        }
        "scale" | "tanh" | "relu" | "sigmoid" => {
            let w = t(&mut rng, &[n, d]);
            let c: f64 = rng.random_range(-2.0..2.0);
            (
                vec![t(&mut rng, &[n, d])],
                Box::new(move |tp, v| {
                    let y = match name {
                        "scale" => tp.scale(v[0], c)?,
                        "tanh" => tp.tanh(v[0])?,
                        "relu" => tp.relu(v[0])?,
                        _ => tp.sigmoid(v[0])?,
                    };
                    weighted(tp, y, &w)
                }),
            )
        }
        "concat_last_axis" => {
            let w = t(&mut rng, &[n, d + o + m]);
            (
                vec![t(&mut rng, &[n, d]), t(&mut rng, &[n, o]), t(&mut rng, &[n, m])],
                Box::new(move |tp, v| {
                    let y = tp.concat_last_axis(v)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "slice_last" => {
            let width = d + o;
            let start = rng.random_range(0..width);
            let len = rng.random_range(1..=width - start);
            let w = t(&mut rng, &[n, m, len]);
            (
                vec![t(&mut rng, &[n, m, width])],
                Box::new(move |tp, v| {
                    let y = tp.slice_last(v[0], start, len)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "gather_rows" => {
            let k = n + m;
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            let w = t(&mut rng, &[k, d]);
            (
                vec![t(&mut rng, &[n, d])],
                Box::new(move |tp, v| {
                    let y = tp.gather_rows(v[0], &idx)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "masked_softmax" => {
            let width = m + 1;
            let mask = random_mask(&mut rng, n, width);
            let w = t(&mut rng, &[n, width]);
            (
                vec![t(&mut rng, &[n, width])],
                Box::new(move |tp, v| {
                    let y = tp.masked_softmax(v[0], &mask)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "pick_per_row" => {
            let pos: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let w = t(&mut rng, &[n]);
            (
                vec![t(&mut rng, &[n, m])],
                Box::new(move |tp, v| {
                    let y = tp.pick_per_row(v[0], &pos)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "select_position" => {
            let pos: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let w = t(&mut rng, &[n, d]);
            (
                vec![t(&mut rng, &[n, m, d])],
                Box::new(move |tp, v| {
                    let y = tp.select_position(v[0], &pos)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "stack" => {
            let w = t(&mut rng, &[n, 3, d]);
            (
                vec![t(&mut rng, &[n, d]), t(&mut rng, &[n, d]), t(&mut rng, &[n, d])],
                Box::new(move |tp, v| {
                    let y = tp.stack(v)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "sum_axis1" => {
            let w = t(&mut rng, &[n, d]);
            (
                vec![t(&mut rng, &[n, m, d])],
                Box::new(move |tp, v| {
                    let y = tp.sum_axis1(v[0])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "reshape" => {
            let w = t(&mut rng, &[m * n, d]);
            (
                vec![t(&mut rng, &[n, m, d])],
                Box::new(move |tp, v| {
                    let y = tp.reshape(v[0], &[m * n, d])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "sum" => (
            vec![t(&mut rng, &[n, m, d])],
            Box::new(|tp, v| {
                let s = tp.sum(v[0])?;
                let sq = tp.mul(s, s)?;
                tp.sum(sq)
            }),
        ),
        "conv1d" => {
            let width = [1, 2, 3, 5][rng.random_range(0..4)];
            let w = t(&mut rng, &[n, m, o]);
            (
                vec![t(&mut rng, &[n, m, d]), t(&mut rng, &[width, d, o])],
                Box::new(move |tp, v| {
                    let y = tp.conv1d(v[0], v[1])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "max_pool_over_positions" | "mean_pool_over_positions" => {
            let mask = random_mask(&mut rng, n, m);
            let w = t(&mut rng, &[n, d]);
            let is_max = name == "max_pool_over_positions";
            (
                vec![t(&mut rng, &[n, m, d])],
                Box::new(move |tp, v| {
                    let y = if is_max {
                        tp.max_pool_over_positions(v[0], &mask)?
                    } else {
                        tp.mean_pool_over_positions(v[0], &mask)?
                    };
                    weighted(tp, y, &w)
                }),
            )
        }
        "dropout" => {
            let w = t(&mut rng, &[n, m, d]);
            let rate = rng.random_range(0.1..0.7);
            let seed = rng.random();
            (
                vec![t(&mut rng, &[n, m, d])],
                Box::new(move |tp, v| {
                    let y = tp.dropout(v[0], rate, true, seed)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "cross_entropy" => {
            let c = o + 1;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut subset: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
            if subset.is_empty() {
                subset.push(0);
            }
            (
                vec![t(&mut rng, &[n, c])],
                Box::new(move |tp, v| tp.cross_entropy(v[0], &labels, &subset)),
            )
        }
        "propagate" => {
            let nodes = n + 2;
            let g = random_graph(&mut rng, nodes, 0.4, 2, 1);
            let adj = Arc::new(normalize_adjacency(&g));
            let w = t(&mut rng, &[nodes, d]);
            (
                vec![t(&mut rng, &[nodes, d])],
                Box::new(move |tp, v| {
                    let y = tp.propagate(&adj, v[0])?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "additive_attention" => {
            let mask = random_mask(&mut rng, n, m);
            let w = t(&mut rng, &[n, m]);
            (
                vec![t(&mut rng, &[n, m, d]), t(&mut rng, &[n, d]), t(&mut rng, &[d, 1])],
                Box::new(move |tp, v| {
                    let y = tp.additive_attention(v[0], v[1], v[2], &mask)?;
                    weighted(tp, y, &w)
                }),
            )
        }
        "composite" => {
            let mask = random_mask(&mut rng, n, m);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..o)).collect();
            let subset: Vec<usize> = (0..n).collect();
            (
                vec![t(&mut rng, &[n, m, d]), t(&mut rng, &[d, o]), t(&mut rng, &[3, d, d])],
                Box::new(move |tp, v| {
                    let c = tp.conv1d(v[0], v[2])?;
                    let c = tp.tanh(c)?;
                    let p = tp.max_pool_over_positions(c, &mask)?;
                    let y = tp.matmul(p, v[1])?;
                    let y = tp.sigmoid(y)?;
                    tp.cross_entropy(y, &labels, &subset)
                }),
            )
        }
        other => panic!("unknown kernel {other}"),
    };
    KernelCase { name, leaves, f }
}

/// Six nodes, three classes, a mix of 1- and 2-hop structure and one isolated
/// node.
pub fn toy_graph() -> Graph {
    let mut r = rng(11);
    let features = random_tensor(&mut r, &[6, 4]);
    Graph::new(features, vec![0, 1, 2, 0, 1, 2], [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)]).unwrap()
}

/// Finite-difference check of the evaluation-mode training loss of `model`
/// with respect to every parameter.
pub fn model_gradcheck(
    model: &gpnn_core::Model,
    labels: &[usize],
    train: &[usize],
    eps: f64,
) -> Result<gpnn_core::autodiff::GradCheckReport> {
    use gpnn_core::autodiff::{finite_difference_check, BoundParams};
    use gpnn_core::model::ForwardOptions;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let leaves: Vec<Tensor> = model.params.values().into_iter().cloned().collect();
    finite_difference_check(
        |tape, vars| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let out = model.forward_bound(tape, &bound, false, 0, ForwardOptions::default())?;
            tape.cross_entropy(out.logits, labels, train)
        },
        &leaves,
        eps,
    )
}
