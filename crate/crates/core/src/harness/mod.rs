//! Training loop, evaluation protocol, grid search and the ranking and
//! over-smoothing analyses.

mod analysis;
mod early_stop;
mod grid;
mod protocol;
mod train;

pub use analysis::{oversmoothing_sweep, ranked_homophily_analysis, RankedHomophily, SweepRow, SweepTable};
pub use early_stop::EarlyStopping;
pub use grid::{grid_search, GridCell, GridResult, GridSpec};
pub use protocol::{mean_stdev, run_protocol, run_protocol_with, AggregateReport};
pub use train::{accuracy, train_model, train_one_split, train_split_model, EpochRecord, RunResult};
