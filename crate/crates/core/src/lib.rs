//! Two-stage prior-guided segmentation: attribute texts become a semantic
//! prior (cognitive stage), the prior modulates image features (perceptual
//! stage), a gate fuses the feature streams and a promptable decoder emits
//! one mask per class. Training, evaluation and ablation drivers sit on top.

pub mod ablation;
pub mod attribute_prior;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod fusion_gate;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod prior_modulation;
pub mod train;

use std::path::{Path, PathBuf};

pub use ablation::{run_ablation, AblationCell, AblationData, AblationRow, AblationSpec};
pub use attribute_prior::{AttributeKind, AttributeText, AttributeTokens, SemanticPrior, Vocab};
pub use backbones::{Prompt, PromptMode, SegPrediction};
pub use config::TrainConfig;
pub use eval::{evaluate, evaluate_records, EvalOutput};
pub use fusion_gate::{BranchMask, GateWeights};
pub use model::{Model, ModelConfig, Toggles};
pub use prior_modulation::{FeatureMap, FeatureRole, PriorToggles};
pub use train::{train, TrainLog, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint fingerprint {found} does not match model fingerprint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] medseg_data::DataError),
    #[error(transparent)]
    Metrics(#[from] medseg_metrics::MetricsError),
}

impl CoreError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
