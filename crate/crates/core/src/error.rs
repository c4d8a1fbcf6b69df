use std::path::PathBuf;

/// Errors produced anywhere in the synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },

    #[error("input is empty")]
    EmptyInput,

    #[error("sequence already contains blanks")]
    AlreadyBlanked,

    #[error("sequence is not blank-interleaved")]
    NotBlanked,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("durations sum to zero")]
    EmptyExpansion,

    #[error("invalid durations: {0}")]
    InvalidDurations(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("waveform too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("no voiced frames")]
    NoVoicedFrames,

    #[error("alignment infeasible: {needed} frames needed, lattice has {frames}")]
    Infeasible { needed: usize, frames: usize },

    #[error("bad lattice: {0}")]
    BadLattice(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad schedule: {0}")]
    BadSchedule(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("missing lattice for utterance {0}")]
    MissingLattice(String),

    #[error("utterance {id}: lattice has {lattice} frames, mel has {mel}")]
    FrameCountMismatch {
        id: String,
        lattice: usize,
        mel: usize,
    },

    #[error("dataset has no usable utterances")]
    EmptyDataset,

    #[error("checkpoint missing: {}", .0.display())]
    CheckpointMissing(PathBuf),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("bad tensor file: {0}")]
    BadTensor(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownSymbol { .. } => "UnknownSymbol",
            Error::EmptyInput => "EmptyInput",
            Error::AlreadyBlanked => "AlreadyBlanked",
            Error::NotBlanked => "NotBlanked",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::EmptyExpansion => "EmptyExpansion",
            Error::InvalidDurations(_) => "InvalidDurations",
            Error::InvalidVocab(_) => "InvalidVocab",
            Error::TooShort { .. } => "TooShort",
            Error::RateMismatch { .. } => "RateMismatch",
            Error::NoVoicedFrames => "NoVoicedFrames",
            Error::Infeasible { .. } => "Infeasible",
            Error::BadLattice(_) => "BadLattice",
            Error::Parse { .. } => "ParseError",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::BadSchedule(_) => "BadSchedule",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::MissingLattice(_) => "MissingLattice",
            Error::FrameCountMismatch { .. } => "FrameCountMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::CheckpointMissing(_) => "CheckpointMissing",
            Error::VocabMismatch(_) => "VocabMismatch",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::BadTensor(_) => "BadTensor",
            Error::Wav(_) => "Wav",
            Error::Manifest(_) => "Manifest",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
