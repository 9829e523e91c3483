//! `gpnn`: command line front-end for graph pointer network experiments.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gpnn_core::ErrorCategory;

#[derive(Debug, Parser)]
#[command(name = "gpnn", version, about = "Graph pointer networks for heterophilic node classification")]
#[command(subcommand_required = false, arg_required_else_help = true, args_conflicts_with_subcommands = true)]
pub struct Cli {
    /// Re-run the invocation recorded in a manifest and compare artifact checksums.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,

    /// Output directory for `--replay` (defaults to `<manifest dir>-replay`).
    #[arg(long, requires = "replay")]
    pub replay_output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Options shared by every dataset-backed subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Dataset directory, or a name resolved under the data root.
    #[arg(long)]
    pub dataset: String,

    /// Root holding `<name>/{edges.txt,features.tsv,splits.json}`.
    #[arg(long, env = "GPNN_DATA_ROOT")]
    pub data_root: Option<PathBuf>,

    /// TOML model config; `--set` values take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// `key=value` override of a config field; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long, default_value = "gpnn-out")]
    pub output_dir: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Node, edge, feature and class counts plus the homophily ratio.
    Stats(Common),
    /// Homophily ratio and isolated-node count.
    Homophily(Common),
    /// Dump the multi-hop node sequences.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Hop limit (defaults to the config's depth_k).
        #[arg(long)]
        k: Option<usize>,
        /// Sequence length (defaults to the config's max_len).
        #[arg(long = "L")]
        max_len: Option<usize>,
    },
    /// Train on one split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Train on all ten splits and aggregate.
    Protocol(Common),
    /// Grid search over the tuned hyper-parameters, then report the best cell.
    Grid {
        #[command(flatten)]
        common: Common,
        /// TOML grid spec (fields hidden, learning_rate, dropout, weight_decay, num_selected_m, max_configs).
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Random subsample size of the grid.
        #[arg(long)]
        max_configs: Option<usize>,
    },
    /// Label agreement of pointer-selected nodes against random 1-hop neighbours.
    RankAnalysis {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        n_select: usize,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Accuracy against depth for several models.
    Oversmooth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "gpnn,gcn")]
        models: Vec<String>,
    },
    /// Convert a Geom-GCN style release into a dataset directory.
    Convert {
        /// Directory with out1_graph_edges.txt and out1_node_feature_label.txt.
        #[arg(long)]
        source: PathBuf,
        /// Directory with the ten split .npz files.
        #[arg(long)]
        splits_dir: Option<PathBuf>,
        /// Only use split files starting with this prefix.
        #[arg(long)]
        split_prefix: Option<String>,
        /// Feature lines list active indices; 0 infers the dimension.
        #[arg(long)]
        sparse_dim: Option<usize>,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

/// A failure carrying the category that decides the exit status.
#[derive(Debug)]
pub struct Failure {
    pub category: ErrorCategory,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn fail(category: ErrorCategory, message: impl Into<String>) -> anyhow::Error {
    Failure {
        category,
        message: message.into(),
    }
    .into()
}

fn category_of(err: &anyhow::Error) -> ErrorCategory {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gpnn_core::Error>() {
            return e.category();
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.category;
        }
    }
    ErrorCategory::Internal
}

fn exit_status(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Internal => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match (cli.replay, cli.command) {
        (Some(manifest), _) => commands::replay(&manifest, cli.replay_output_dir),
        (None, Some(cmd)) => commands::dispatch(cmd),
        (None, None) => Err(fail(ErrorCategory::Config, "no subcommand given")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = category_of(&err);
            let message = format!("{err:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {message}", category.as_str());
            ExitCode::from(exit_status(category))
        }
    }
}
