//! Dataset ingestion, encoding, normalization, splitting and evaluation.

mod dataset;
pub mod idx;
mod metrics;
mod split;
pub mod synth;

pub use dataset::{load_csv, load_csv_bytes, Dataset, Polarity, Schema};
pub use idx::load_mnist;
pub use metrics::auc;
pub use split::{prepare, vertical_split, EvalSplit, HolderViews, NormStats, Prepared, VerticalSplit, CONSTANT_STD};
