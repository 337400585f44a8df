//! Data preparation, training loop, metrics, and the historical-average
//! baseline.

pub mod data;
pub mod fit;
pub mod metrics;

pub use data::{SeriesDataset, Split, Splits, ZScore};
pub use fit::{train_loop, EpochRecord, TrainConfig, TrainOutcome, TrainProgress};
pub use metrics::{evaluate, historical_average, EvalOptions, MetricReport};
