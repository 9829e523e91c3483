//! Node classifiers: the graph pointer network and the MLP / GCN baselines,
//! behind a single [`Model`] front-end used by the harness.

pub mod baselines;
pub mod config;
pub mod gpnn;

use std::sync::Arc;

pub use baselines::{baseline_gcn_forward, baseline_mlp_forward, init_baseline_params};
pub use config::{CellType, LayerOrderKind, ModelConfig, ModelKind, Pooling, SelectionMode};
pub use gpnn::{
    decoder_select, gcn_embed, gpnn_forward, gpnn_forward_with, init_gpnn_params, nonlocal_aggregate,
    run_encoder, Attention, Cell, CellState, DecoderInputs, EncoderOutput, ForwardOptions, GpnnContext,
    GpnnOutput, PointerOutput, NO_SELECTION,
};

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, NormalizedAdjacency};
use crate::sampler::{sample_sequences_with, NodeSequenceBatch};

/// Stacked GPNN layers. With `layers = 1` this is exactly [`gpnn_forward`].
pub fn stack_gpnn_layers(
    tape: &mut Tape,
    ctx: &GpnnContext,
    params: &BoundParams,
    cfg: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<GpnnOutput> {
    gpnn_forward(tape, ctx, params, cfg, training, seed)
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub pointers: Vec<PointerOutput>,
}

/// A configured model bound to one graph: parameters plus the graph-derived
/// inputs (normalized adjacency and sampled sequences) that stay fixed for the
/// whole run.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    num_classes: usize,
    ctx: GpnnContext,
}

impl Model {
    pub fn new(g: &Graph, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let adjacency = Arc::new(normalize_adjacency(g));
        let sequences = match config.model {
            ModelKind::Gpnn => sample_sequences_with(g, config.depth_k, config.max_len, config.layer_order())?,
            _ => sample_sequences_with(g, 0, 1, config.layer_order())?,
        };
        Self::with_inputs(g.features().clone(), g.num_classes(), adjacency, sequences, config)
    }

    /// Builds a model over precomputed graph inputs, so that many runs on one
    /// graph can share them.
    pub fn with_inputs(
        features: Tensor,
        num_classes: usize,
        adjacency: Arc<NormalizedAdjacency>,
        sequences: NodeSequenceBatch,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        if features.rank() != 2 || features.shape()[0] != adjacency.num_nodes() {
            return Err(Error::Shape {
                op: "model",
                lhs: features.shape().to_vec(),
                rhs: vec![adjacency.num_nodes()],
            });
        }
        let f = features.shape()[1];
        let params = match config.model {
            ModelKind::Gpnn => init_gpnn_params(config, f, num_classes),
            ModelKind::Mlp | ModelKind::Gcn => init_baseline_params(config, f, num_classes),
        };
        Ok(Model {
            config: config.clone(),
            params,
            num_classes,
            ctx: GpnnContext {
                adjacency,
                sequences,
                features,
            },
        })
    }

    /// Replaces the parameters with a fresh initialization drawn from `seed`.
    pub fn reinitialize(&mut self, seed: u64) {
        let cfg = ModelConfig {
            seed,
            ..self.config.clone()
        };
        let f = self.ctx.features.shape()[1];
        let c = self.num_classes;
        self.params = match cfg.model {
            ModelKind::Gpnn => init_gpnn_params(&cfg, f, c),
            ModelKind::Mlp | ModelKind::Gcn => init_baseline_params(&cfg, f, c),
        };
    }

    pub fn sequences(&self) -> &NodeSequenceBatch {
        &self.ctx.sequences
    }

    pub fn context(&self) -> &GpnnContext {
        &self.ctx
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records a forward pass with `params` already bound on `tape`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        training: bool,
        seed: u64,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        let cfg = &self.config;
        match cfg.model {
            ModelKind::Gpnn => {
                let out = gpnn_forward_with(tape, &self.ctx, params, cfg, training, seed, opts)?;
                Ok(Forward {
                    logits: out.logits,
                    pointers: out.pointers,
                })
            }
            ModelKind::Mlp => Ok(Forward {
                logits: baseline_mlp_forward(tape, &self.ctx.features, params, cfg, training, seed)?,
                pointers: Vec::new(),
            }),
            ModelKind::Gcn => Ok(Forward {
                logits: baseline_gcn_forward(
                    tape,
                    &self.ctx.features,
                    &self.ctx.adjacency,
                    params,
                    cfg,
                    training,
                    seed,
                )?,
                pointers: Vec::new(),
            }),
        }
    }

    /// Evaluation-mode logits `[N, C]`.
    pub fn logits(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let out = self.forward_bound(&mut tape, &bound, false, 0, ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Evaluation-mode pointer selections of every layer (empty for baselines).
    pub fn pointers(&self, opts: ForwardOptions) -> Result<Vec<PointerOutput>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        Ok(self.forward_bound(&mut tape, &bound, false, 0, opts)?.pointers)
    }

    /// Arg-max class per node, ties to the lowest class id.
    pub fn predict(&self) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits()?))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    (0..logits.outer_len())
        .map(|r| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
