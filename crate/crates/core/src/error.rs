use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("blended skinning transform is singular (det = {det:e})")]
    SingularSkinning { det: f64 },

    #[error("unknown motion preset `{0}` (expected idle-sway, arm-wave, walk-cycle or twist)")]
    UnknownMotion(String),

    #[error("image size {width}x{height} is not divisible by the encoder factor {factor}")]
    ImageSize { width: usize, height: usize, factor: usize },

    #[error("need at least {needed} source views, got {got}")]
    TooFewViews { needed: usize, got: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("frame {frame} is missing view {view} ({path})")]
    MissingView { frame: usize, view: usize, path: PathBuf },

    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("dataset has no depth maps")]
    MissingDepth,

    #[error("checkpoint has a bad magic header")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint precision tag {found} does not match the requested {expected}")]
    PrecisionMismatch { found: u8, expected: u8 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("checkpoint has no appearance blending weights")]
    MissingBlendWeights,

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short variant name, printed by the command-line tool.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "Autodiff",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::InvalidSkeleton(_) => "InvalidSkeleton",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Config(_) => "Config",
            Error::SingularSkinning { .. } => "SingularSkinning",
            Error::UnknownMotion(_) => "UnknownMotion",
            Error::ImageSize { .. } => "ImageSize",
            Error::TooFewViews { .. } => "TooFewViews",
            Error::SizeMismatch(_) => "SizeMismatch",
            Error::Io { .. } => "Io",
            Error::MissingFile(_) => "MissingFile",
            Error::MissingView { .. } => "MissingView",
            Error::Png { .. } => "Png",
            Error::Manifest(_) => "Manifest",
            Error::SchemaVersion { .. } => "SchemaVersion",
            Error::MissingDepth => "MissingDepth",
            Error::BadMagic => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::PrecisionMismatch { .. } => "PrecisionMismatch",
            Error::Truncated => "Truncated",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::ArchitectureMismatch(_) => "ArchitectureMismatch",
            Error::MissingBlendWeights => "MissingBlendWeights",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
