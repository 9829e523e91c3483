use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_model, RunResult};
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitSet, NUM_SPLITS};
use crate::model::gpnn::derive_seed;
use crate::model::{Model, ModelConfig};

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
/// Deviations are taken from the first element, so identical inputs give a
/// stdev of exactly zero.
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else {
        return (0.0, 0.0);
    };
    let n = xs.len() as f64;
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub model: String,
    /// Statistics over the runs that did not abort.
    pub mean_accuracy: f64,
    pub stdev_accuracy: f64,
    pub mean_val_accuracy: f64,
    pub n_splits: usize,
    /// False when any split aborted.
    pub complete: bool,
    pub per_split: Vec<RunResult>,
}

impl AggregateReport {
    pub fn from_runs(dataset: &str, model: &str, per_split: Vec<RunResult>) -> Self {
        let ok: Vec<&RunResult> = per_split.iter().filter(|r| r.aborted.is_none()).collect();
        let test: Vec<f64> = ok.iter().map(|r| r.test_accuracy).collect();
        let val: Vec<f64> = ok.iter().map(|r| r.val_accuracy).collect();
        let (mean_accuracy, stdev_accuracy) = mean_stdev(&test);
        AggregateReport {
            dataset: dataset.to_string(),
            model: model.to_string(),
            mean_accuracy,
            stdev_accuracy,
            mean_val_accuracy: mean_stdev(&val).0,
            n_splits: ok.len(),
            complete: ok.len() == per_split.len(),
            per_split,
        }
    }

    /// Recomputes the summary statistics from `per_split`.
    pub fn recomputed(&self) -> AggregateReport {
        Self::from_runs(&self.dataset, &self.model, self.per_split.clone())
    }

    pub const CSV_HEADER: &'static str = "dataset,model,mean,stdev,n_splits";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.dataset, self.model, self.mean_accuracy, self.stdev_accuracy, self.n_splits
        )
    }

    pub fn to_csv(reports: &[&AggregateReport]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in reports {
            writeln!(out, "{}", r.csv_row()).unwrap();
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, Self::to_csv(&[self])).map_err(|e| Error::io(csv_path, e))
    }
}

pub fn run_protocol(g: &Graph, splits: &[SplitSet], cfg: &ModelConfig, dataset: &str) -> Result<AggregateReport> {
    run_protocol_with(g, splits, cfg, dataset, None)
}

/// Trains one model per split in parallel. With `log_dir`, each split appends
/// its epochs to `<log_dir>/split_<i>.jsonl`.
pub fn run_protocol_with(
    g: &Graph,
    splits: &[SplitSet],
    cfg: &ModelConfig,
    dataset: &str,
    log_dir: Option<&Path>,
) -> Result<AggregateReport> {
    if splits.len() != NUM_SPLITS {
        return Err(Error::Validation(format!(
            "protocol needs {NUM_SPLITS} splits, got {}",
            splits.len()
        )));
    }
    let template = Model::new(g, cfg)?;
    let runs = splits
        .par_iter()
        .map(|split| {
            let mut model = template.clone();
            model.reinitialize(derive_seed(cfg.seed, &[split.split_id as u64]));
            let log = log_dir.map(|d| d.join(format!("split_{}.jsonl", split.split_id)));
            train_model(&mut model, g.labels(), split, log.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregateReport::from_runs(dataset, cfg.model.as_str(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_stdev() {
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stdev(&[0.7; 10]).1, 0.0);
    }
}
