//! Synthetic attribute-labelled segmentation data: scene generation,
//! preprocessing rules, the boundary-overlap measure and the on-disk
//! dataset layout.

mod attributes;
mod dataset;
mod image;
pub mod io;
pub mod kv;
mod mask;
mod overlap;
mod sample;
mod scene;

use std::path::{Path, PathBuf};

pub use attributes::{AttributeRecord, Position, Shape, Texture};
pub use dataset::{
    generate_overlap_sweep, generate_sample, generate_split, DatasetConfig, TEST_SEED_OFFSET, VAL_SEED_OFFSET,
};
pub use image::{normalize_intensity, ImageSample};
pub use mask::Mask;
pub use overlap::{overlap_rate, DEFAULT_TAU};
pub use sample::{filter_small_masks, ClassAnnotation, Domain, SegSample, DOMAIN_COUNT, SMALL_MASK_THRESHOLD};
pub use scene::{generate_scene, ObjectSpec, SceneSpec, AREA_TOLERANCE, MAX_TOTAL_AREA, OVERLAP_TOLERANCE};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{}: record {index}: {msg}", file.display())]
    Record { file: PathBuf, index: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}
