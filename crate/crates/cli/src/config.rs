//! Resolution of datasets and model configs from command line options.

use std::path::{Path, PathBuf};

use anyhow::Result;
use gpnn_core::graph::{load_dataset, load_splits, DatasetPaths};
use gpnn_core::{ErrorCategory, Graph, ModelConfig, SplitSet};

use crate::{fail, Common};

/// A directory path is used as is; anything else is looked up under the data root.
pub fn resolve_dataset_dir(common: &Common) -> Result<PathBuf> {
    let direct = Path::new(&common.dataset);
    if direct.is_dir() {
        return Ok(absolute(direct));
    }
    match &common.data_root {
        Some(root) if root.join(&common.dataset).is_dir() => Ok(absolute(&root.join(&common.dataset))),
        Some(root) => Err(fail(
            ErrorCategory::Data,
            format!("dataset {:?} not found as a directory or under {}", common.dataset, root.display()),
        )),
        None => Err(fail(
            ErrorCategory::Data,
            format!("dataset {:?} is not a directory and GPNN_DATA_ROOT is unset", common.dataset),
        )),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn resolve_config(common: &Common) -> Result<ModelConfig> {
    let base = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| fail(ErrorCategory::Config, format!("reading {}: {e}", path.display())))?;
            ModelConfig::from_toml(&text)?
        }
        None => ModelConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for warning in cfg.grid_warnings() {
        log::warn!("{warning}");
    }
    Ok(cfg)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub graph: Graph,
    pub splits: Option<Vec<SplitSet>>,
}

pub fn load(common: &Common) -> Result<Dataset> {
    let dir = resolve_dataset_dir(common)?;
    let paths = DatasetPaths::in_dir(&dir);
    let graph = load_dataset(&paths.edges, &paths.features)?;
    let splits = if paths.splits.exists() {
        Some(load_splits(&paths.splits, &graph)?)
    } else {
        None
    };
    Ok(Dataset { dir, graph, splits })
}

impl Dataset {
    pub fn require_splits(&self) -> Result<&[SplitSet]> {
        self.splits.as_deref().ok_or_else(|| {
            fail(
                ErrorCategory::Data,
                format!("{} has no splits.json", self.dir.display()),
            )
        })
    }
}
