//! Evaluation metrics, lagged spatial correlation and heatmap export.

mod correlation;
mod heatmap;
mod metrics;

pub use correlation::{hourly_series, lagged_correlation, CorrelationGrid, DiagonalMode};
pub use heatmap::{heatmap, heatmap_file_name, write_heatmap};
pub use metrics::{metric_report, metrics, pearson, MetricReport, Metrics};
