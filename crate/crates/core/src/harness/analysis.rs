use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::run_protocol;
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitSet};
use crate::model::{ForwardOptions, Model, ModelConfig, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHomophily {
    /// Mean fraction of the top pointer-selected nodes sharing the centre's label.
    pub gpnn_ratio: f64,
    /// Same statistic for uniformly drawn 1-hop neighbours.
    pub random_1hop_ratio: f64,
    pub n_select: usize,
    pub gpnn_nodes: usize,
    pub gpnn_skipped: usize,
    pub random_nodes: usize,
    pub random_skipped: usize,
}

/// Compares the label agreement of the first `n_select` pointer choices of the
/// first layer (the centre itself excluded) against `n_select` random 1-hop
/// neighbours. Neighbours are drawn with replacement only when the degree is
/// below `n_select`.
pub fn ranked_homophily_analysis(g: &Graph, model: &Model, n_select: usize, seed: u64) -> Result<RankedHomophily> {
    if model.config.model != ModelKind::Gpnn {
        return Err(Error::Config("ranking analysis needs a gpnn model".into()));
    }
    if n_select == 0 {
        return Err(Error::Config("n_select must be >= 1".into()));
    }
    // One extra decoding step covers the case where the centre is picked.
    let opts = ForwardOptions {
        num_selected_override: Some(n_select + 1),
    };
    let pointers = model.pointers(opts)?;
    let ptr = pointers
        .first()
        .ok_or_else(|| Error::State("model produced no pointer output".into()))?;
    let labels = g.labels();
    let seqs = model.sequences();

    let (mut gpnn_sum, mut gpnn_nodes, mut gpnn_skipped) = (0.0, 0, 0);
    for v in 0..g.num_nodes() {
        let chosen: Vec<usize> = ptr
            .selected_nodes(seqs, v)
            .into_iter()
            .filter(|&u| u != v)
            .take(n_select)
            .collect();
        if chosen.is_empty() {
            gpnn_skipped += 1;
            continue;
        }
        let same = chosen.iter().filter(|&&u| labels[u] == labels[v]).count();
        gpnn_sum += same as f64 / chosen.len() as f64;
        gpnn_nodes += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rand_sum, mut random_nodes, mut random_skipped) = (0.0, 0, 0);
    for v in 0..g.num_nodes() {
        let nbrs = g.neighbors(v);
        if nbrs.is_empty() {
            random_skipped += 1;
            continue;
        }
        let draws: Vec<usize> = if nbrs.len() < n_select {
            (0..n_select).map(|_| *nbrs.choose(&mut rng).unwrap()).collect()
        } else {
            nbrs.choose_multiple(&mut rng, n_select).copied().collect()
        };
        let same = draws.iter().filter(|&&u| labels[u] == labels[v]).count();
        rand_sum += same as f64 / draws.len() as f64;
        random_nodes += 1;
    }
    if gpnn_skipped + random_skipped > 0 {
        log::warn!("ranking analysis skipped {gpnn_skipped} pointer rows and {random_skipped} isolated nodes");
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(RankedHomophily {
        gpnn_ratio: avg(gpnn_sum, gpnn_nodes),
        random_1hop_ratio: avg(rand_sum, random_nodes),
        n_select,
        gpnn_nodes,
        gpnn_skipped,
        random_nodes,
        random_skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub layers: usize,
    /// `None` when any split of this cell aborted.
    pub mean_acc: Option<f64>,
    /// `(acc_ref - acc) / acc_ref` against the reference depth.
    pub rel_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub reference_layers: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn get(&self, model: ModelKind, layers: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.model == model.as_str() && r.layers == layers)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,layers,mean_acc,rel_decay\n");
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.model, r.layers, fmt(r.mean_acc), fmt(r.rel_decay)).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains every model in `models` at every depth in `layer_counts`. Decay is
/// measured against the 2-layer point, or the shallowest depth when 2 is not
/// in the list.
pub fn oversmoothing_sweep(
    g: &Graph,
    splits: &[SplitSet],
    cfg: &ModelConfig,
    layer_counts: &[usize],
    models: &[ModelKind],
) -> Result<SweepTable> {
    if layer_counts.is_empty() || layer_counts.contains(&0) {
        return Err(Error::Config("layer counts must be non-empty and >= 1".into()));
    }
    let reference = if layer_counts.contains(&2) {
        2
    } else {
        *layer_counts.iter().min().unwrap()
    };
    let mut rows = Vec::new();
    for &kind in models {
        let mut cells = Vec::new();
        for &layers in layer_counts {
            let cell_cfg = ModelConfig {
                model: kind,
                layers: Some(layers),
                ..cfg.clone()
            };
            let report = run_protocol(g, splits, &cell_cfg, "sweep")?;
            log::info!("sweep {} x{layers}: {:.4}", kind.as_str(), report.mean_accuracy);
            cells.push((layers, report.complete.then_some(report.mean_accuracy)));
        }
        let base = cells.iter().find(|(l, _)| *l == reference).and_then(|(_, a)| *a);
        for (layers, acc) in cells {
            let rel_decay = match (base, acc) {
                (Some(b), Some(a)) if b > 0.0 => Some((b - a) / b),
                _ => None,
            };
            rows.push(SweepRow {
                model: kind.as_str().to_string(),
                layers,
                mean_acc: acc,
                rel_decay,
            });
        }
    }
    Ok(SweepTable {
        reference_layers: reference,
        rows,
    })
}
