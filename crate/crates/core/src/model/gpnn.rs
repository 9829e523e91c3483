//! Graph pointer network forward pass.
//!
//! Per layer: a GCN embedding of the node features, a recurrent encoder over
//! each node's sampled sequence, a pointer decoder that picks the `m` most
//! relevant positions one at a time, and a 1-D convolution with pooling over
//! the picked embeddings. The ego projection, the GCN embedding and the pooled
//! non-local feature are concatenated; stacked layers project that back to the
//! hidden width, and the last one feeds the classifier head.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CellType, ModelConfig, Pooling, SelectionMode};
use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::sampler::NodeSequenceBatch;

/// Sentinel for pointer slots left empty when a sequence has fewer than `m`
/// candidates.
pub const NO_SELECTION: i64 = -1;

pub(crate) fn layer_key(layer: usize, name: &str) -> String {
    format!("gpnn{layer}.{name}")
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Glorot-uniform weights, zero biases (forget-gate bias 1 for LSTM cells).
pub fn init_gpnn_params(cfg: &ModelConfig, in_features: usize, num_classes: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let (d, d_out, d_ego) = (h, h, h);
    let gates = match cfg.cell_type {
        CellType::TanhCell => 1,
        CellType::LstmCell => 4,
    };
    let layers = cfg.effective_layers();
    let mut p = ParamStore::new();
    for l in 0..layers {
        let fin = if l == 0 { in_features } else { d };
        let key = |n: &str| layer_key(l, n);
        p.insert(key("gcn_weight"), glorot(&mut rng, vec![fin, d], fin, d));
        for cell in ["encoder", "decoder"] {
            p.insert(
                key(&format!("{cell}_weight")),
                glorot(&mut rng, vec![d + h, gates * h], d + h, gates * h),
            );
            if cfg.cell_type == CellType::LstmCell {
                let mut b = Tensor::zeros(vec![4 * h]);
                b.data_mut()[h..2 * h].fill(1.0);
                p.insert(key(&format!("{cell}_bias")), b);
            }
        }
        p.insert(key("attn_w1"), glorot(&mut rng, vec![h, h], h, h));
        p.insert(key("attn_w2"), glorot(&mut rng, vec![h, h], h, h));
        p.insert(key("attn_v"), glorot(&mut rng, vec![h, 1], h, 1));
        p.insert(key("start_token"), glorot(&mut rng, vec![d], d, d));
        let w = cfg.conv_width;
        p.insert(key("conv_filters"), glorot(&mut rng, vec![w, d, d_out], w * d, w * d_out));
        p.insert(key("conv_bias"), Tensor::zeros(vec![d_out]));
        p.insert(key("ego_weight"), glorot(&mut rng, vec![fin, d_ego], fin, d_ego));
        let width = d_ego + d + d_out;
        if l + 1 < layers {
            p.insert(key("proj_weight"), glorot(&mut rng, vec![width, d], width, d));
            p.insert(key("proj_bias"), Tensor::zeros(vec![d]));
        }
    }
    let width = d_ego + d + d_out;
    p.insert("head.ffn_weight", glorot(&mut rng, vec![width, num_classes], width, num_classes));
    p.insert("head.ffn_bias", Tensor::zeros(vec![num_classes]));
    p
}

/// `relu(D^-1/2 (A + I) D^-1/2 x W)`, computed as a sparse product after the
/// dense projection.
pub fn gcn_embed(tape: &mut Tape, x: Var, adj: &Arc<NormalizedAdjacency>, weight: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    let prop = tape.propagate(adj, xw)?;
    tape.relu(prop)
}

/// Recurrent cell shared by the encoder and the decoder.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub kind: CellType,
    pub weight: Var,
    pub bias: Option<Var>,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl Cell {
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> Result<CellState> {
        let h = tape.constant(Tensor::zeros(vec![rows, self.hidden]))?;
        let c = match self.kind {
            CellType::TanhCell => None,
            CellType::LstmCell => Some(h),
        };
        Ok(CellState { h, c })
    }

    /// `tanh(W [h, x])` for the tanh cell; a standard LSTM update otherwise.
    pub fn step(&self, tape: &mut Tape, state: CellState, x: Var) -> Result<CellState> {
        let joined = tape.concat_last_axis(&[state.h, x])?;
        let mut z = tape.matmul(joined, self.weight)?;
        if let Some(b) = self.bias {
            z = tape.add(z, b)?;
        }
        match self.kind {
            CellType::TanhCell => Ok(CellState {
                h: tape.tanh(z)?,
                c: None,
            }),
            CellType::LstmCell => {
                let h = self.hidden;
                let gate = |tape: &mut Tape, k: usize| tape.slice_last(z, k * h, h);
                let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
                let (i, f, o) = (tape.sigmoid(i)?, tape.sigmoid(f)?, tape.sigmoid(o)?);
                let g = tape.tanh(g)?;
                let prev = state
                    .c
                    .ok_or_else(|| Error::State("lstm cell without cell state".into()))?;
                let keep = tape.mul(f, prev)?;
                let write = tape.mul(i, g)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                Ok(CellState {
                    h: tape.mul(o, tc)?,
                    c: Some(c),
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[N, L, h]` hidden state after every position.
    pub states: Var,
    /// State after the last unmasked position of each row.
    pub last: CellState,
}

/// Runs `cell` over `seq_embeddings[N, L, d]`, whose masked positions are
/// expected to hold zero vectors.
pub fn run_encoder(
    tape: &mut Tape,
    cell: &Cell,
    seq_embeddings: Var,
    lengths: &[usize],
) -> Result<EncoderOutput> {
    let shape = tape.shape(seq_embeddings).to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(Error::Shape {
            op: "run_encoder",
            lhs: shape,
            rhs: vec![lengths.len()],
        });
    }
    let (n, l) = (shape[0], shape[1]);
    if let Some(row) = lengths.iter().position(|&len| len == 0 || len > l) {
        return Err(Error::DegenerateMask {
            op: "run_encoder",
            row,
        });
    }
    let mut state = cell.zero_state(tape, n)?;
    let mut hs = Vec::with_capacity(l);
    let mut cs = Vec::with_capacity(l);
    for pos in 0..l {
        let x = tape.select_position(seq_embeddings, &vec![pos; n])?;
        state = cell.step(tape, state, x)?;
        hs.push(state.h);
        cs.extend(state.c);
    }
    let states = tape.stack(&hs)?;
    let last_pos: Vec<usize> = lengths.iter().map(|&len| len - 1).collect();
    let h = tape.select_position(states, &last_pos)?;
    let c = if cs.is_empty() {
        None
    } else {
        let stacked = tape.stack(&cs)?;
        Some(tape.select_position(stacked, &last_pos)?)
    };
    Ok(EncoderOutput {
        states,
        last: CellState { h, c },
    })
}

/// Pointer-network attention parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub w1: Var,
    pub w2: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct PointerOutput {
    /// `N x m` chosen sequence positions, [`NO_SELECTION`] for empty slots.
    pub selected_positions: Vec<i64>,
    /// `N x m` pointer probability of each choice, 0 for empty slots.
    pub selected_probs: Vec<f64>,
    /// `[N, m, d]` embeddings of the chosen nodes in selection order.
    pub ranked_embeddings: Var,
    /// `N x m` true where a slot holds a selection.
    pub slot_mask: Vec<bool>,
    pub num_selected: usize,
}

impl PointerOutput {
    /// Node ids of the selections of row `v`, in selection order.
    pub fn selected_nodes(&self, batch: &NodeSequenceBatch, v: usize) -> Vec<usize> {
        let m = self.num_selected;
        self.selected_positions[v * m..(v + 1) * m]
            .iter()
            .filter(|&&p| p != NO_SELECTION)
            .map(|&p| batch.indices()[v * batch.max_len() + p as usize])
            .collect()
    }
}

pub struct DecoderInputs<'a> {
    pub encoder: &'a EncoderOutput,
    /// `[N, L, d]` masked sequence embeddings.
    pub seq_embeddings: Var,
    /// `[N, d]` node embeddings the sequences index into.
    pub node_embeddings: Var,
    pub batch: &'a NodeSequenceBatch,
    pub start_token: Var,
}

/// Selects `m` positions per row step by step. Already selected positions
/// are masked out of later steps; rows that run out of candidates emit zero
/// vectors.
pub fn decoder_select(
    tape: &mut Tape,
    inputs: &DecoderInputs<'_>,
    cell: &Cell,
    attn: &Attention,
    m: usize,
    mode: SelectionMode,
) -> Result<PointerOutput> {
    if m == 0 {
        return Err(Error::Validation("number of selected nodes must be >= 1".into()));
    }
    let batch = inputs.batch;
    let (n, l) = (batch.num_nodes(), batch.max_len());
    let keys = tape.matmul(inputs.encoder.states, attn.w1)?;

    let d = tape.shape(inputs.node_embeddings)[1];
    let zeros = tape.constant(Tensor::zeros(vec![n, d]))?;
    let mut input = tape.add(zeros, inputs.start_token)?;
    let mut state = inputs.encoder.last;
    let mut available = batch.mask().to_vec();

    let mut positions = vec![NO_SELECTION; n * m];
    let mut probs = vec![0.0; n * m];
    let mut slot_mask = vec![false; n * m];
    let mut outputs = Vec::with_capacity(m);

    for step in 0..m {
        state = cell.step(tape, state, input)?;
        let mut step_mask = available.clone();
        let mut row_valid = vec![true; n];
        for r in 0..n {
            if !available[r * l..(r + 1) * l].iter().any(|&a| a) {
                row_valid[r] = false;
                step_mask[r * l] = true;
            }
        }
        let query = tape.matmul(state.h, attn.w2)?;
        let scores = tape.additive_attention(keys, query, attn.v, &step_mask)?;
        let p = tape.masked_softmax(scores, &step_mask)?;
        let pv = tape.value(p).data();
        let mut choice = vec![0usize; n];
        for r in 0..n {
            let mut best = None;
            for j in 0..l {
                if step_mask[r * l + j] && best.is_none_or(|b: usize| pv[r * l + j] > pv[r * l + b]) {
                    best = Some(j);
                }
            }
            choice[r] = best.expect("row has a candidate");
            if row_valid[r] {
                positions[r * m + step] = choice[r] as i64;
                probs[r * m + step] = pv[r * l + choice[r]];
                slot_mask[r * m + step] = true;
                available[r * l + choice[r]] = false;
            }
        }
        tape.record_discrete(choice.iter().map(|&c| c as u64));

        let nodes: Vec<usize> = (0..n).map(|r| batch.indices()[r * l + choice[r]]).collect();
        let picked = tape.gather_rows(inputs.node_embeddings, &nodes)?;
        let mut out = match mode {
            SelectionMode::HardScaled => {
                let weight = tape.pick_per_row(p, &choice)?;
                let weight = tape.reshape(weight, &[n, 1])?;
                tape.mul(picked, weight)?
            }
            SelectionMode::Soft => {
                let weight = tape.reshape(p, &[n, l, 1])?;
                let weighted = tape.mul(inputs.seq_embeddings, weight)?;
                tape.sum_axis1(weighted)?
            }
        };
        if row_valid.iter().any(|v| !v) {
            let keep = row_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let keep = tape.constant(Tensor::new(vec![n, 1], keep)?)?;
            out = tape.mul(out, keep)?;
        }
        outputs.push(out);
        input = picked;
    }

    Ok(PointerOutput {
        selected_positions: positions,
        selected_probs: probs,
        ranked_embeddings: tape.stack(&outputs)?,
        slot_mask,
        num_selected: m,
    })
}

/// `pool(relu(conv1d(ranked) + bias))` over the occupied slots.
pub fn nonlocal_aggregate(
    tape: &mut Tape,
    ranked: Var,
    slot_mask: &[bool],
    filters: Var,
    bias: Var,
    pooling: Pooling,
) -> Result<Var> {
    let conv = tape.conv1d(ranked, filters)?;
    let conv = tape.add(conv, bias)?;
    let act = tape.relu(conv)?;
    match pooling {
        Pooling::Max => tape.max_pool_over_positions(act, slot_mask),
        Pooling::Mean => tape.mean_pool_over_positions(act, slot_mask),
    }
}

/// Static inputs shared by every forward pass of one model.
#[derive(Debug, Clone)]
pub struct GpnnContext {
    pub adjacency: Arc<NormalizedAdjacency>,
    pub sequences: NodeSequenceBatch,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct GpnnOutput {
    pub logits: Var,
    /// Pointer selections of every stacked layer.
    pub pointers: Vec<PointerOutput>,
}

/// Decoding options that differ from the trained configuration, used by the
/// ranking analysis.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub num_selected_override: Option<usize>,
}

pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

pub fn gpnn_forward(
    tape: &mut Tape,
    ctx: &GpnnContext,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<GpnnOutput> {
    gpnn_forward_with(tape, ctx, params, cfg, training, seed, ForwardOptions::default())
}

pub fn gpnn_forward_with(
    tape: &mut Tape,
    ctx: &GpnnContext,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
    opts: ForwardOptions,
) -> Result<GpnnOutput> {
    let batch = &ctx.sequences;
    let (n, l) = (batch.num_nodes(), batch.max_len());
    let m = opts.num_selected_override.unwrap_or(cfg.num_selected_m);
    let layers = cfg.effective_layers();
    let mask_const = {
        let data = batch.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![n, l, 1], data)?
    };

    let mut x = tape.constant(ctx.features.clone())?;
    let mut pointers = Vec::with_capacity(layers);
    let mut final_repr = None;
    for layer in 0..layers {
        let key = |name: &str| params.get(&layer_key(layer, name));
        let site = |k: u64| derive_seed(seed, &[layer as u64, k]);
        let x_in = tape.dropout(x, cfg.dropout, training, site(0))?;

        let emb = gcn_embed(tape, x_in, &ctx.adjacency, key("gcn_weight")?)?;
        let emb = tape.dropout(emb, cfg.dropout, training, site(1))?;
        let d = tape.shape(emb)[1];

        let seq = tape.gather_rows(emb, batch.indices())?;
        let seq = tape.reshape(seq, &[n, l, d])?;
        let mask = tape.constant(mask_const.clone())?;
        let seq = tape.mul(seq, mask)?;

        let bias = |name: &str| -> Result<Option<Var>> {
            match cfg.cell_type {
                CellType::TanhCell => Ok(None),
                CellType::LstmCell => Ok(Some(key(name)?)),
            }
        };
        let encoder = Cell {
            kind: cfg.cell_type,
            weight: key("encoder_weight")?,
            bias: bias("encoder_bias")?,
            hidden: cfg.hidden,
        };
        let decoder = Cell {
            weight: key("decoder_weight")?,
            bias: bias("decoder_bias")?,
            ..encoder
        };
        let enc = run_encoder(tape, &encoder, seq, batch.lengths())?;
        let attn = Attention {
            w1: key("attn_w1")?,
            w2: key("attn_w2")?,
            v: key("attn_v")?,
        };
        let inputs = DecoderInputs {
            encoder: &enc,
            seq_embeddings: seq,
            node_embeddings: emb,
            batch,
            start_token: key("start_token")?,
        };
        let ptr = decoder_select(tape, &inputs, &decoder, &attn, m, cfg.selection_mode)?;
        let z = nonlocal_aggregate(
            tape,
            ptr.ranked_embeddings,
            &ptr.slot_mask,
            key("conv_filters")?,
            key("conv_bias")?,
            cfg.pooling,
        )?;
        let ego = tape.matmul(x_in, key("ego_weight")?)?;
        let combined = tape.concat_last_axis(&[ego, emb, z])?;
        pointers.push(ptr);

        if layer + 1 < layers {
            let proj = tape.matmul(combined, key("proj_weight")?)?;
            x = tape.add(proj, key("proj_bias")?)?;
        } else {
            final_repr = Some(combined);
        }
    }

    let repr = final_repr.expect("at least one layer");
    let repr = tape.dropout(repr, cfg.dropout, training, derive_seed(seed, &[u64::MAX]))?;
    let logits = tape.matmul(repr, params.get("head.ffn_weight")?)?;
    let logits = tape.add(logits, params.get("head.ffn_bias")?)?;
    Ok(GpnnOutput { logits, pointers })
}
