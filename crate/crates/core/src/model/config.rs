use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::LayerOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gpnn,
    Mlp,
    Gcn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gpnn => "gpnn",
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
        }
    }
}

/// How a pointer choice is turned into an output embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The argmax node's embedding scaled by its pointer probability.
    HardScaled,
    /// Probability-weighted mix of all candidate embeddings.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    TanhCell,
    LstmCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrderKind {
    Ascending,
    Shuffled,
}

/// Flat hyper-parameter record. Field names double as the keys accepted in
/// config files and `key=value` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub hidden: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub num_selected_m: usize,
    pub depth_k: usize,
    #[serde(alias = "max_len_L")]
    pub max_len: usize,
    pub selection_mode: SelectionMode,
    pub cell_type: CellType,
    /// Stacked layers; absent means 1 for GPNN and 2 for the baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub conv_width: usize,
    pub pooling: Pooling,
    pub layer_order: LayerOrderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model: ModelKind::Gpnn,
            hidden: 32,
            learning_rate: 0.01,
            dropout: 0.5,
            weight_decay: 5e-4,
            num_selected_m: 4,
            depth_k: 2,
            max_len: 16,
            selection_mode: SelectionMode::HardScaled,
            cell_type: CellType::TanhCell,
            layers: None,
            seed: 0,
            epochs: 2000,
            patience: 100,
            conv_width: 3,
            pooling: Pooling::Max,
            layer_order: LayerOrderKind::Ascending,
        }
    }
}

pub const HIDDEN_GRID: [usize; 3] = [16, 32, 64];
pub const LEARNING_RATE_GRID: [f64; 2] = [0.01, 0.005];
pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.5, 0.99];
pub const WEIGHT_DECAY_GRID: [f64; 4] = [1e-3, 5e-4, 5e-5, 5e-6];
pub const NUM_SELECTED_GRID: [usize; 4] = [1, 2, 4, 8];

impl ModelConfig {
    pub fn for_model(model: ModelKind) -> Self {
        ModelConfig {
            model,
            ..Default::default()
        }
    }

    pub fn effective_layers(&self) -> usize {
        self.layers.unwrap_or(match self.model {
            ModelKind::Gpnn => 1,
            ModelKind::Mlp | ModelKind::Gcn => 2,
        })
    }

    pub fn layer_order(&self) -> LayerOrder {
        match self.layer_order {
            LayerOrderKind::Ascending => LayerOrder::Ascending,
            LayerOrderKind::Shuffled => LayerOrder::Shuffled { seed: self.seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 {
            return fail("hidden must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.num_selected_m == 0 {
            return fail("num_selected_m must be >= 1".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be >= 1".into());
        }
        if self.layers == Some(0) {
            return fail("layers must be >= 1".into());
        }
        if self.conv_width == 0 {
            return fail("conv_width must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        Ok(())
    }

    /// Values that lie outside the documented search space. They are legal.
    pub fn grid_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !HIDDEN_GRID.contains(&self.hidden) {
            out.push(format!("hidden {} outside {HIDDEN_GRID:?}", self.hidden));
        }
        if !LEARNING_RATE_GRID.contains(&self.learning_rate) {
            out.push(format!("learning_rate {} outside {LEARNING_RATE_GRID:?}", self.learning_rate));
        }
        if !DROPOUT_GRID.contains(&self.dropout) {
            out.push(format!("dropout {} outside {DROPOUT_GRID:?}", self.dropout));
        }
        if !WEIGHT_DECAY_GRID.contains(&self.weight_decay) {
            out.push(format!("weight_decay {} outside {WEIGHT_DECAY_GRID:?}", self.weight_decay));
        }
        if self.model == ModelKind::Gpnn && !NUM_SELECTED_GRID.contains(&self.num_selected_m) {
            out.push(format!(
                "num_selected_m {} outside {NUM_SELECTED_GRID:?}",
                self.num_selected_m
            ));
        }
        out
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: ModelConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
