//! Structure-free perceptron and stacked GCN baselines.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelKind};
use super::gpnn::{derive_seed, glorot};
use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::NormalizedAdjacency;

fn prefix(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Mlp => "mlp",
        _ => "gcn",
    }
}

/// `layers` weight/bias pairs named `<kind><i>.weight` / `<kind><i>.bias`.
pub fn init_baseline_params(cfg: &ModelConfig, in_features: usize, num_classes: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = cfg.effective_layers();
    let mut p = ParamStore::new();
    for i in 0..layers {
        let fin = if i == 0 { in_features } else { cfg.hidden };
        let fout = if i + 1 == layers { num_classes } else { cfg.hidden };
        let name = prefix(cfg.model);
        p.insert(format!("{name}{i}.weight"), glorot(&mut rng, vec![fin, fout], fin, fout));
        p.insert(format!("{name}{i}.bias"), Tensor::zeros(vec![fout]));
    }
    p
}

fn stacked(
    tape: &mut Tape,
    x: &Tensor,
    adj: Option<&Arc<NormalizedAdjacency>>,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let name = prefix(cfg.model);
    let layers = cfg.effective_layers();
    let mut h = tape.constant(x.clone())?;
    for i in 0..layers {
        h = tape.dropout(h, cfg.dropout, training, derive_seed(seed, &[i as u64]))?;
        h = tape.matmul(h, params.get(&format!("{name}{i}.weight"))?)?;
        if let Some(adj) = adj {
            h = tape.propagate(adj, h)?;
        }
        h = tape.add(h, params.get(&format!("{name}{i}.bias"))?)?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Perceptron with relu hidden layers; the graph is never read.
pub fn baseline_mlp_forward(
    tape: &mut Tape,
    x: &Tensor,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<Var> {
    stacked(tape, x, None, params, cfg, training, seed)
}

/// `layers` propagations `Â H W + b` with relu between them.
pub fn baseline_gcn_forward(
    tape: &mut Tape,
    x: &Tensor,
    adj: &Arc<NormalizedAdjacency>,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<Var> {
    stacked(tape, x, Some(adj), params, cfg, training, seed)
}
