//! Supervised attribution of fingerprints to attack classes: dataset
//! splits, early-stopped training and evaluation reports.

pub mod dataset;
pub mod eval;
pub mod train;

pub use dataset::{assemble, build_splits, choose_sources, AttributionDataset, SplitConfig, SplitSources, Splits};
pub use eval::{evaluate, mean_std, predict, EvalReport, EvalSummary};
pub use train::{history_to_csv, train_attributor, HistoryRow, TrainProtocol, TrainedAttributor};
