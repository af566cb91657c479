//! Datasets, half-image occlusion, and the synthetic task generator.

mod dataset;
pub mod directory;
mod image;
pub mod synthetic;

pub use self::image::{occlude, to_batch, GrayImage, LabeledImage, Occlusion, Target};
pub use dataset::{all_batch, gather_batch, DatasetSplit, SplitName, TaskKind};
pub use directory::{load_directory, save_directory};
pub use synthetic::{generate_synthetic, generate_with, SyntheticConfig, SyntheticTask};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("image is already occluded ({0:?})")]
    AlreadyOccluded(Occlusion),
    #[error("half occlusion needs an even image height, got {0}")]
    OddHeight(usize),
    #[error("n = {n} is too small (need at least {minimum})")]
    InvalidN { n: usize, minimum: usize },
    #[error("noise must lie in [0, 1), got {0}")]
    InvalidNoise(f64),
    #[error("missing manifest {0}")]
    MissingManifest(String),
    #[error("manifest references missing file {0}")]
    MissingFile(String),
    #[error("corrupt image {file}: {reason}")]
    CorruptImage { file: String, reason: String },
    #[error("target `{target}` out of range for {file}")]
    LabelOutOfRange { file: String, target: String },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("class {0} has no training samples")]
    MissingClass(usize),
    #[error("pixel values outside [0, 1] in {0}")]
    PixelRange(String),
    #[error("image size {got:?} differs from {expected:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("empty dataset")]
    Empty,
    #[error("{0}: {1}")]
    Io(String, String),
}
