//! Segmentation metrics and the analyses run over evaluation records.

mod report;
mod seg;
mod stats;
mod stratify;

pub use report::{overlap_fit, write_reports, OverlapFit, Summary, METRICS_HEADER};
pub use seg::{dice, distance_transform, hd95, percentile};
pub use stats::{ols_slope, pearson_r};
pub use stratify::{
    mean_dice, mean_dice_over_classes, stratify, EvalRecord, StratumKey, StratumRow, SMALL_OBJECT_AREA,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("masks differ in shape")]
    Shape,
    #[error("need at least two points, got {0}")]
    TooFew(usize),
    #[error("series lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("no records")]
    Empty,
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
