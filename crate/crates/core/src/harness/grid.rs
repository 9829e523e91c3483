use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{run_protocol, AggregateReport};
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitSet};
use crate::model::config::{DROPOUT_GRID, HIDDEN_GRID, LEARNING_RATE_GRID, NUM_SELECTED_GRID, WEIGHT_DECAY_GRID};
use crate::model::{ModelConfig, ModelKind};

/// Candidate values per tuned hyper-parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub hidden: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    /// Ignored for the baselines.
    pub num_selected_m: Vec<usize>,
    /// Random subsample size; `None` runs every cell.
    pub max_configs: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            hidden: HIDDEN_GRID.to_vec(),
            learning_rate: LEARNING_RATE_GRID.to_vec(),
            dropout: DROPOUT_GRID.to_vec(),
            weight_decay: WEIGHT_DECAY_GRID.to_vec(),
            num_selected_m: NUM_SELECTED_GRID.to_vec(),
            max_configs: None,
        }
    }
}

impl GridSpec {
    /// The grid holding only `cfg`'s own values.
    pub fn singleton(cfg: &ModelConfig) -> Self {
        GridSpec {
            hidden: vec![cfg.hidden],
            learning_rate: vec![cfg.learning_rate],
            dropout: vec![cfg.dropout],
            weight_decay: vec![cfg.weight_decay],
            num_selected_m: vec![cfg.num_selected_m],
            max_configs: None,
        }
    }

    /// Cartesian product over `base`, subsampled with `base.seed` when
    /// `max_configs` is set. Order is deterministic.
    pub fn configs(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let ms = if base.model == ModelKind::Gpnn {
            self.num_selected_m.clone()
        } else {
            vec![base.num_selected_m]
        };
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &learning_rate in &self.learning_rate {
                for &dropout in &self.dropout {
                    for &weight_decay in &self.weight_decay {
                        for &num_selected_m in &ms {
                            out.push(ModelConfig {
                                hidden,
                                learning_rate,
                                dropout,
                                weight_decay,
                                num_selected_m,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        if let Some(max) = self.max_configs {
            if max < out.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
                let mut idx: Vec<usize> = (0..out.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(max);
                idx.sort_unstable();
                out = idx.into_iter().map(|i| out[i].clone()).collect();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: ModelConfig,
    pub mean_val_accuracy: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_config: ModelConfig,
    /// Full protocol report of the selected configuration.
    pub report: AggregateReport,
    /// Validation summary of every cell; test accuracy is deliberately omitted.
    pub cells: Vec<GridCell>,
}

/// Picks the configuration with the highest mean validation accuracy among
/// cells whose runs all completed; ties go to the earlier cell.
pub fn grid_search(
    g: &Graph,
    splits: &[SplitSet],
    base: &ModelConfig,
    grid: &GridSpec,
    dataset: &str,
) -> Result<GridResult> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    let mut cells = Vec::with_capacity(configs.len());
    let mut best: Option<(f64, AggregateReport)> = None;
    for cfg in configs {
        let report = run_protocol(g, splits, &cfg, dataset)?;
        log::info!(
            "grid cell {}: val {:.4} complete={}",
            cells.len(),
            report.mean_val_accuracy,
            report.complete
        );
        cells.push(GridCell {
            config: cfg,
            mean_val_accuracy: report.mean_val_accuracy,
            complete: report.complete,
        });
        if report.complete && best.as_ref().is_none_or(|(v, _)| report.mean_val_accuracy > *v) {
            best = Some((report.mean_val_accuracy, report));
        }
    }
    let (_, report) = best.ok_or_else(|| Error::NonFinite("every grid cell diverged"))?;
    Ok(GridResult {
        best_config: report.per_split[0].config.clone(),
        report,
        cells,
    })
}
