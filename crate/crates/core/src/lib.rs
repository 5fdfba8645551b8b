//! Voxel-wise tumor growth prediction from longitudinal CT/PET.
//!
//! The pipeline: per-timepoint invasion channels (scaled SUV, ICVF, mask),
//! mask-pair optical flow with a growth map as expansion channels, balanced
//! 17x17 patch sampling, population training of five classifier layouts,
//! two-step personalization on the patient's first interval, and prediction
//! of the third timepoint inside a growth zone. A linear radial extrapolator
//! serves as the comparator and a phantom generator supplies test cohorts.

pub mod baseline;
pub mod config;
pub mod evalharness;
pub mod growthmodels;
pub mod motion;
pub mod ppm;
pub mod preprocess;
pub mod sampling;
pub mod synthgen;
pub mod volumes;

use std::path::Path;

pub use config::RunConfig;
pub use volumes::{LongitudinalCase, StudyTimepoint, TumorMask, Volume3D, VoxelBox};

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("patient {patient}: {source}")]
    Fold {
        patient: String,
        #[source]
        source: Box<CoreError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    BareIo(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nnet(#[from] tumorcast_nnet::NnetError),
}

impl CoreError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short stable identifier for machine-readable error records.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidVolume(_) => "invalid_volume",
            Self::InvalidMask(_) => "invalid_mask",
            Self::EmptyMask(_) => "empty_mask",
            Self::DimsMismatch(_) => "dims_mismatch",
            Self::InvalidInput(_) => "invalid_input",
            Self::InvalidConfig(_) => "invalid_config",
            Self::Fold { source, .. } => source.code(),
            Self::Io { .. } | Self::BareIo(_) => "io",
            Self::Json(_) => "json",
            Self::Nnet(_) => "nnet",
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
