//! Dynamic reverse-mode tape.
//!
//! Every forward pass records primitive applications into a [`Tape`] arena in
//! execution order, so the arena is already topologically sorted and the
//! reverse pass is a single backwards sweep. Handles ([`Var`]) are plain
//! indices into the arena and are only meaningful for the tape that issued them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    SliceLast {
        input: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    MaskedSoftmax(Var),
    PickPerRow {
        input: Var,
        positions: Vec<usize>,
    },
    SelectPosition {
        input: Var,
        positions: Vec<usize>,
    },
    Stack(Vec<Var>),
    SumAxis1(Var),
    Reshape(Var),
    Sum(Var),
    Conv1d {
        input: Var,
        filters: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        input: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        subset: Vec<usize>,
    },
    Propagate {
        input: Var,
        adj: Arc<NormalizedAdjacency>,
    },
    AdditiveAttention {
        keys: Var,
        query: Var,
        v: Var,
        /// `tanh(keys + query)`, zero at masked positions.
        hidden: Vec<f64>,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Arena of recorded primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    trace: u64,
}

const TRACE_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const PAR_THRESHOLD: usize = 1 << 16;

impl Tape {
    pub fn new() -> Self {
        Tape {
            trace: TRACE_SEED,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Hash of every discrete branch taken during the forward pass (relu
    /// signs, pooling winners, pointer choices). Two passes with equal
    /// signatures evaluate the same smooth piece of the function.
    pub fn discrete_signature(&self) -> u64 {
        self.trace
    }

    pub fn record_discrete(&mut self, items: impl IntoIterator<Item = u64>) {
        for x in items {
            self.mix(x);
        }
    }

    fn mix(&mut self, x: u64) {
        self.trace = (self.trace ^ x).wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ------------------------------------------------------------------
    // Kernels
    // ------------------------------------------------------------------

    /// `a[.., k] x b[k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = bv.shape()[1];
        let out = matmul_kernel(av.data(), av.last_dim(), bv.data(), n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("add", self.value(a).shape(), self.value(b).shape())?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.len()];
        bc.for_each(|o, ia, ib| out[o] = ad[ia] + bd[ib]);
        let value = Tensor::new(bc.out_shape.clone(), out)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("mul", self.value(a).shape(), self.value(b).shape())?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.len()];
        bc.for_each(|o, ia, ib| out[o] = ad[ia] * bd[ib]);
        let value = Tensor::new(bc.out_shape.clone(), out)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let mut word = 0u64;
        let mut signs = Vec::with_capacity(value.len() / 64 + 1);
        for (i, x) in self.value(a).data().iter().enumerate() {
            if *x > 0.0 {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                signs.push(word);
                word = 0;
            }
        }
        signs.push(word);
        self.record_discrete(signs);
        self.push("relu", value, Op::Relu(a), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        Tensor::new(v.shape().to_vec(), data).expect("same shape")
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_last_axis",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push("concat_last_axis", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let w = v.last_dim();
        if v.rank() == 0 || start + len > w {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(v.outer_len() * len);
        for r in 0..v.outer_len() {
            out.extend_from_slice(&v.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice_last", value, Op::SliceLast { input: a, start }, &[a])
    }

    /// `table[R, d]` indexed by `indices` -> `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![*bad],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    /// Softmax over the trailing axis restricted to `mask`; masked entries
    /// get probability exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(scores);
        if mask.len() != v.len() || v.rank() == 0 {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let w = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for r in 0..v.outer_len() {
            let row = &v.data()[r * w..(r + 1) * w];
            let m = &mask[r * w..(r + 1) * w];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask {
                    op: "masked_softmax",
                    row: r,
                });
            }
            let o = &mut out[r * w..(r + 1) * w];
            let mut z = 0.0;
            for j in 0..w {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax(scores), &[scores])
    }

    /// `input[R, L]` -> `[R]` holding `input[r, positions[r]]`.
    pub fn pick_per_row(&mut self, input: Var, positions: &[usize]) -> Result<Var> {
        let v = self.value(input);
        if v.rank() != 2 || positions.len() != v.shape()[0] {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: v.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let w = v.shape()[1];
        let mut out = Vec::with_capacity(positions.len());
        for (r, &p) in positions.iter().enumerate() {
            if p >= w {
                return Err(Error::Shape {
                    op: "pick_per_row",
                    lhs: v.shape().to_vec(),
                    rhs: vec![p],
                });
            }
            out.push(v.data()[r * w + p]);
        }
        let value = Tensor::new(vec![positions.len()], out)?;
        let op = Op::PickPerRow {
            input,
            positions: positions.to_vec(),
        };
        self.push("pick_per_row", value, op, &[input])
    }

    /// `input[N, L, h]` -> `[N, h]` holding `input[n, positions[n], :]`.
    pub fn select_position(&mut self, input: Var, positions: &[usize]) -> Result<Var> {
        let v = self.value(input);
        if v.rank() != 3 || positions.len() != v.shape()[0] {
            return Err(Error::Shape {
                op: "select_position",
                lhs: v.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let (l, h) = (v.shape()[1], v.shape()[2]);
        let mut out = Vec::with_capacity(positions.len() * h);
        for (n, &p) in positions.iter().enumerate() {
            if p >= l {
                return Err(Error::Shape {
                    op: "select_position",
                    lhs: v.shape().to_vec(),
                    rhs: vec![p],
                });
            }
            let start = (n * l + p) * h;
            out.extend_from_slice(&v.data()[start..start + h]);
        }
        let value = Tensor::new(vec![positions.len(), h], out)?;
        let op = Op::SelectPosition {
            input,
            positions: positions.to_vec(),
        };
        self.push("select_position", value, op, &[input])
    }

    /// Stacks `k` tensors of shape `[N, h]` into `[N, k, h]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("stack of zero tensors".into()))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::Shape {
                op: "stack",
                lhs: s0,
                rhs: vec![],
            });
        }
        for p in parts {
            if self.value(*p).shape() != s0.as_slice() {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: s0,
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
        }
        let (n, h, k) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; n * k * h];
        for (j, p) in parts.iter().enumerate() {
            let d = self.value(*p).data();
            for r in 0..n {
                out[(r * k + j) * h..(r * k + j + 1) * h].copy_from_slice(&d[r * h..(r + 1) * h]);
            }
        }
        let value = Tensor::new(vec![n, k, h], out)?;
        self.push("stack", value, Op::Stack(parts.to_vec()), parts)
    }

    /// `[N, L, d]` -> `[N, d]` summing over the middle axis.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 3 {
            return Err(Error::Shape {
                op: "sum_axis1",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, l, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..l {
                let src = &v.data()[(r * l + j) * d..(r * l + j + 1) * d];
                for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        self.push("sum_axis1", value, Op::SumAxis1(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// One-dimensional convolution over the middle axis with zero "same"
    /// padding: `input[N, m, c]` with `filters[w, c, o]` -> `[N, m, o]`.
    pub fn conv1d(&mut self, input: Var, filters: Var) -> Result<Var> {
        let (x, f) = (self.value(input), self.value(filters));
        if x.rank() != 3 || f.rank() != 3 || x.shape()[2] != f.shape()[1] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        let geo = ConvGeometry::new(x.shape(), f.shape());
        let mut out = vec![0.0; geo.n * geo.m * geo.o];
        for r in 0..geo.n {
            for t in 0..geo.m {
                let dst = &mut out[(r * geo.m + t) * geo.o..(r * geo.m + t + 1) * geo.o];
                for s in 0..geo.w {
                    let Some(src_t) = geo.source(t, s) else { continue };
                    let src = &x.data()[(r * geo.m + src_t) * geo.c..(r * geo.m + src_t + 1) * geo.c];
                    for (ci, &xv) in src.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let frow = &f.data()[(s * geo.c + ci) * geo.o..(s * geo.c + ci + 1) * geo.o];
                        for (dv, fv) in dst.iter_mut().zip(frow) {
                            *dv += xv * fv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![geo.n, geo.m, geo.o], out)?;
        self.push("conv1d", value, Op::Conv1d { input, filters }, &[input, filters])
    }

    /// Max over unmasked positions of `input[N, m, c]` -> `[N, c]`; ties go
    /// to the lowest position.
    pub fn max_pool_over_positions(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let (n, m, c) = self.pool_dims("max_pool_over_positions", input, mask)?;
        let v = self.value(input).data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for r in 0..n {
            let first = (0..m).find(|&j| mask[r * m + j]).ok_or(Error::DegenerateMask {
                op: "max_pool_over_positions",
                row: r,
            })?;
            for ch in 0..c {
                let mut best = first;
                for j in first + 1..m {
                    if mask[r * m + j] && v[(r * m + j) * c + ch] > v[(r * m + best) * c + ch] {
                        best = j;
                    }
                }
                out[r * c + ch] = v[(r * m + best) * c + ch];
                argmax[r * c + ch] = best;
            }
        }
        self.record_discrete(argmax.iter().map(|&a| a as u64));
        let value = Tensor::new(vec![n, c], out)?;
        let op = Op::MaxPool { input, argmax };
        self.push("max_pool_over_positions", value, op, &[input])
    }

    pub fn mean_pool_over_positions(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let (n, m, c) = self.pool_dims("mean_pool_over_positions", input, mask)?;
        let v = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let count = mask[r * m..(r + 1) * m].iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(Error::DegenerateMask {
                    op: "mean_pool_over_positions",
                    row: r,
                });
            }
            for j in (0..m).filter(|&j| mask[r * m + j]) {
                for ch in 0..c {
                    out[r * c + ch] += v[(r * m + j) * c + ch] / count as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let op = Op::MeanPool {
            input,
            mask: mask.to_vec(),
        };
        self.push("mean_pool_over_positions", value, op, &[input])
    }

    fn pool_dims(&self, op: &'static str, input: Var, mask: &[bool]) -> Result<(usize, usize, usize)> {
        let s = self.value(input).shape();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` at train
    /// time, so evaluation is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?)?;
        self.mul(a, mask)
    }

    /// Mean cross-entropy of `logits[N, C]` against `labels` over the rows
    /// listed in `subset`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], subset: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 2 || labels.len() != v.shape()[0] {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if subset.is_empty() {
            return Err(Error::Validation("cross_entropy over an empty subset".into()));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut probs = Vec::with_capacity(subset.len() * c);
        let mut loss = 0.0;
        for &r in subset {
            if r >= n || labels[r] >= c {
                return Err(Error::Validation(format!(
                    "cross_entropy row {r} or its label out of range"
                )));
            }
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[labels[r]];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        let value = Tensor::scalar(loss / subset.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            subset: subset.to_vec(),
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Sparse symmetric propagation `D^-1/2 (A + I) D^-1/2 x` for `x[N, d]`.
    pub fn propagate(&mut self, adj: &Arc<NormalizedAdjacency>, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || v.shape()[0] != adj.num_nodes() {
            return Err(Error::Shape {
                op: "propagate",
                lhs: vec![adj.num_nodes(), adj.num_nodes()],
                rhs: v.shape().to_vec(),
            });
        }
        let out = adj.apply(v.data(), v.shape()[1]);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let op = Op::Propagate {
            input: x,
            adj: Arc::clone(adj),
        };
        self.push("propagate", value, op, &[x])
    }

    /// Additive attention scores `s[n, l] = v . tanh(keys[n, l] + query[n])`
    /// for `keys[N, L, h]`, `query[N, h]` and `v[h, 1]`. Positions where
    /// `mask` is false score exactly zero and pass no gradient.
    pub fn additive_attention(&mut self, keys: Var, query: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let (k, q, vv) = (self.value(keys), self.value(query), self.value(v));
        let bad = k.rank() != 3
            || q.shape() != [k.shape()[0], k.shape()[2]]
            || vv.len() != k.shape()[2]
            || mask.len() != k.shape()[0] * k.shape()[1];
        if bad {
            return Err(Error::Shape {
                op: "additive_attention",
                lhs: k.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let (n, l, h) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let mut hidden = vec![0.0; n * l * h];
        let mut out = vec![0.0; n * l];
        for r in 0..n {
            let qr = &q.data()[r * h..(r + 1) * h];
            for j in (0..l).filter(|&j| mask[r * l + j]) {
                let base = (r * l + j) * h;
                let mut acc = 0.0;
                for i in 0..h {
                    let t = (k.data()[base + i] + qr[i]).tanh();
                    hidden[base + i] = t;
                    acc += vv.data()[i] * t;
                }
                out[r * l + j] = acc;
            }
        }
        let value = Tensor::new(vec![n, l], out)?;
        let op = Op::AdditiveAttention {
            keys,
            query,
            v,
            hidden,
            mask: mask.to_vec(),
        };
        self.push("additive_attention", value, op, &[keys, query, v])
    }

    // ------------------------------------------------------------------
    // Reverse pass
    // ------------------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every value that requires
    /// them. Leaves that did not participate receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![],
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                if self.requires_grad(*a) {
                    send(*a, like(*a, matmul_transpose_b(g.data(), n, bv.data(), k)));
                }
                if self.requires_grad(*b) {
                    send(*b, like(*b, matmul_transpose_a(av.data(), k, g.data(), n)));
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = Broadcast::new("add", av.shape(), bv.shape()).expect("checked");
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let gd = g.data();
                bc.for_each(|o, ia, ib| {
                    if is_mul {
                        ga[ia] += gd[o] * bv.data()[ib];
                        gb[ib] += gd[o] * av.data()[ia];
                    } else {
                        ga[ia] += gd[o];
                        gb[ib] += gd[o];
                    }
                });
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::Scale(a, c) => send(*a, like(*a, g.data().iter().map(|x| x * c).collect())),
            Op::Tanh(a) => {
                let data = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y));
                send(*a, like(*a, data.collect()));
            }
            Op::Sigmoid(a) => {
                let data = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y));
                send(*a, like(*a, data.collect()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = g.data().iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                send(*a, like(*a, data.collect()));
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.outer_len();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        send(*p, like(*p, data));
                    }
                    offset += w;
                }
            }
            Op::SliceLast { input, start } => {
                let iv = self.value(*input);
                let (w, len) = (iv.last_dim(), out.last_dim());
                let mut data = vec![0.0; iv.len()];
                for r in 0..out.outer_len() {
                    data[r * w + start..r * w + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                send(*input, like(*input, data));
            }
            Op::GatherRows { table, indices } => {
                let t = self.value(*table);
                let d = t.last_dim();
                let mut data = vec![0.0; t.len()];
                for (j, &i) in indices.iter().enumerate() {
                    for (dst, src) in data[i * d..(i + 1) * d].iter_mut().zip(&g.data()[j * d..(j + 1) * d]) {
                        *dst += src;
                    }
                }
                send(*table, like(*table, data));
            }
            Op::MaskedSoftmax(scores) => {
                let w = out.last_dim();
                let mut data = vec![0.0; out.len()];
                for r in 0..out.outer_len() {
                    let p = &out.data()[r * w..(r + 1) * w];
                    let gr = &g.data()[r * w..(r + 1) * w];
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..w {
                        data[r * w + j] = p[j] * (gr[j] - dot);
                    }
                }
                send(*scores, like(*scores, data));
            }
            Op::PickPerRow { input, positions } => {
                let w = self.value(*input).last_dim();
                let mut data = vec![0.0; self.value(*input).len()];
                for (r, &p) in positions.iter().enumerate() {
                    data[r * w + p] = g.data()[r];
                }
                send(*input, like(*input, data));
            }
            Op::SelectPosition { input, positions } => {
                let s = self.value(*input).shape();
                let (l, h) = (s[1], s[2]);
                let mut data = vec![0.0; self.value(*input).len()];
                for (n, &p) in positions.iter().enumerate() {
                    data[(n * l + p) * h..(n * l + p + 1) * h]
                        .copy_from_slice(&g.data()[n * h..(n + 1) * h]);
                }
                send(*input, like(*input, data));
            }
            Op::Stack(parts) => {
                let (n, k, h) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                for (j, p) in parts.iter().enumerate() {
                    if !self.requires_grad(*p) {
                        continue;
                    }
                    let mut data = Vec::with_capacity(n * h);
                    for r in 0..n {
                        data.extend_from_slice(&g.data()[(r * k + j) * h..(r * k + j + 1) * h]);
                    }
                    send(*p, like(*p, data));
                }
            }
            Op::SumAxis1(a) => {
                let s = self.value(*a).shape();
                let (n, l, d) = (s[0], s[1], s[2]);
                let mut data = Vec::with_capacity(n * l * d);
                for r in 0..n {
                    for _ in 0..l {
                        data.extend_from_slice(&g.data()[r * d..(r + 1) * d]);
                    }
                }
                send(*a, like(*a, data));
            }
            Op::Reshape(a) => send(*a, like(*a, g.data().to_vec())),
            Op::Sum(a) => send(*a, like(*a, vec![g.data()[0]; self.value(*a).len()])),
            Op::Conv1d { input, filters } => {
                let (x, f) = (self.value(*input), self.value(*filters));
                let geo = ConvGeometry::new(x.shape(), f.shape());
                let mut gx = vec![0.0; x.len()];
                let mut gf = vec![0.0; f.len()];
                for r in 0..geo.n {
                    for t in 0..geo.m {
                        let go = &g.data()[(r * geo.m + t) * geo.o..(r * geo.m + t + 1) * geo.o];
                        for s in 0..geo.w {
                            let Some(src_t) = geo.source(t, s) else { continue };
                            let base = (r * geo.m + src_t) * geo.c;
                            for ci in 0..geo.c {
                                let frow = (s * geo.c + ci) * geo.o;
                                let xv = x.data()[base + ci];
                                let mut acc = 0.0;
                                for oi in 0..geo.o {
                                    acc += go[oi] * f.data()[frow + oi];
                                    gf[frow + oi] += go[oi] * xv;
                                }
                                gx[base + ci] += acc;
                            }
                        }
                    }
                }
                send(*input, like(*input, gx));
                send(*filters, like(*filters, gf));
            }
            Op::MaxPool { input, argmax } => {
                let s = self.value(*input).shape();
                let (m, c) = (s[1], s[2]);
                let mut data = vec![0.0; self.value(*input).len()];
                for (i, &j) in argmax.iter().enumerate() {
                    let (r, ch) = (i / c, i % c);
                    data[(r * m + j) * c + ch] += g.data()[i];
                }
                send(*input, like(*input, data));
            }
            Op::MeanPool { input, mask } => {
                let s = self.value(*input).shape();
                let (n, m, c) = (s[0], s[1], s[2]);
                let mut data = vec![0.0; self.value(*input).len()];
                for r in 0..n {
                    let count = mask[r * m..(r + 1) * m].iter().filter(|&&b| b).count() as f64;
                    for j in (0..m).filter(|&j| mask[r * m + j]) {
                        for ch in 0..c {
                            data[(r * m + j) * c + ch] = g.data()[r * c + ch] / count;
                        }
                    }
                }
                send(*input, like(*input, data));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                subset,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g.data()[0] / subset.len() as f64;
                let mut data = vec![0.0; self.value(*logits).len()];
                for (k, &r) in subset.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == labels[r] { 1.0 } else { 0.0 };
                        data[r * c + j] += scale * (probs[k * c + j] - target);
                    }
                }
                send(*logits, like(*logits, data));
            }
            Op::Propagate { input, adj } => {
                let d = out.last_dim();
                send(*input, like(*input, adj.apply_transpose(g.data(), d)));
            }
            Op::AdditiveAttention {
                keys,
                query,
                v,
                hidden,
                mask,
            } => {
                let ks = self.value(*keys).shape();
                let (n, l, h) = (ks[0], ks[1], ks[2]);
                let vd = self.value(*v).data();
                let mut gk = vec![0.0; n * l * h];
                let mut gq = vec![0.0; n * h];
                let mut gv = vec![0.0; h];
                for r in 0..n {
                    for j in (0..l).filter(|&j| mask[r * l + j]) {
                        let gs = g.data()[r * l + j];
                        if gs == 0.0 {
                            continue;
                        }
                        let base = (r * l + j) * h;
                        for i in 0..h {
                            let t = hidden[base + i];
                            gv[i] += gs * t;
                            let d = gs * vd[i] * (1.0 - t * t);
                            gk[base + i] = d;
                            gq[r * h + i] += d;
                        }
                    }
                }
                send(*keys, like(*keys, gk));
                send(*query, like(*query, gq));
                send(*v, like(*v, gv));
            }
        }
    }
}

/// Row-major `a[rows, k] x b[k, n]`, skipping zero entries of `a`.
pub(crate) fn matmul_kernel(a: &[f64], k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let rows = if k == 0 { 0 } else { a.len() / k };
    let mut out = vec![0.0; rows * n];
    let row_fn = |(i, dst): (usize, &mut [f64])| {
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in dst.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    };
    if n == 0 {
        return out;
    }
    if rows * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_fn);
    }
    out
}

/// `g[rows, n] x b[k, n]^T -> [rows, k]`.
fn matmul_transpose_b(g: &[f64], n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let rows = if n == 0 { 0 } else { g.len() / n };
    let mut out = vec![0.0; rows * k];
    if k == 0 {
        return out;
    }
    let row_fn = |(i, dst): (usize, &mut [f64])| {
        let gr = &g[i * n..(i + 1) * n];
        for (kk, o) in dst.iter_mut().enumerate() {
            *o = gr.iter().zip(&b[kk * n..(kk + 1) * n]).map(|(x, y)| x * y).sum();
        }
    };
    if rows * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(k).enumerate().for_each(row_fn);
    }
    out
}

/// `a[rows, k]^T x g[rows, n] -> [k, n]`. Rows are reduced in fixed-size
/// blocks summed in block order, so the result does not depend on the
/// number of worker threads.
fn matmul_transpose_a(a: &[f64], k: usize, g: &[f64], n: usize) -> Vec<f64> {
    const BLOCK: usize = 256;
    let rows = if k == 0 { 0 } else { a.len() / k };
    let block_fn = |start: usize| {
        let mut acc = vec![0.0; k * n];
        for i in start..(start + BLOCK).min(rows) {
            let gr = &g[i * n..(i + 1) * n];
            for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in acc[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                    *o += av * gv;
                }
            }
        }
        acc
    };
    let starts: Vec<usize> = (0..rows).step_by(BLOCK).collect();
    let partials: Vec<Vec<f64>> = if rows * k * n >= PAR_THRESHOLD {
        starts.par_iter().map(|&s| block_fn(s)).collect()
    } else {
        starts.iter().map(|&s| block_fn(s)).collect()
    };
    let mut out = vec![0.0; k * n];
    for p in partials {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    m: usize,
    c: usize,
    w: usize,
    o: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], f: &[usize]) -> Self {
        ConvGeometry {
            n: x[0],
            m: x[1],
            c: x[2],
            w: f[0],
            o: f[2],
            pad_left: f[0].saturating_sub(1) / 2,
        }
    }

    /// Input position read by output position `t` through filter tap `s`,
    /// or `None` when it falls in the zero padding.
    fn source(&self, t: usize, s: usize) -> Option<usize> {
        let p = (t + s).checked_sub(self.pad_left)?;
        (p < self.m).then_some(p)
    }
}

/// Numpy-style broadcast plan for tensors of rank at most three.
struct Broadcast {
    dims: [usize; 3],
    stride_a: [usize; 3],
    stride_b: [usize; 3],
    out_shape: Vec<usize>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = [1usize; 3];
            p[3 - s.len()..].copy_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut dims = [1usize; 3];
        for i in 0..3 {
            dims[i] = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::Shape {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
        }
        let strides = |p: [usize; 3]| {
            let natural = [p[1] * p[2], p[2], 1];
            let mut s = [0usize; 3];
            for i in 0..3 {
                s[i] = if p[i] == 1 { 0 } else { natural[i] };
            }
            s
        };
        Ok(Broadcast {
            dims,
            stride_a: strides(pa),
            stride_b: strides(pb),
            out_shape: dims[3 - rank..].to_vec(),
        })
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2] = self.dims;
        let mut o = 0;
        for i in 0..d0 {
            for j in 0..d1 {
                let ia = i * self.stride_a[0] + j * self.stride_a[1];
                let ib = i * self.stride_b[0] + j * self.stride_b[1];
                for k in 0..d2 {
                    f(o, ia + k * self.stride_a[2], ib + k * self.stride_b[2]);
                    o += 1;
                }
            }
        }
    }
}
