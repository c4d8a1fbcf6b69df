//! Dataset preparation, training, checkpoints, inference and benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod fixtures;
pub mod infer;
pub mod manifest;
pub mod prepare;
pub mod train;

pub use bench::{benchmark_rtf, linear_fit, RtfReport};
pub use checkpoint::{Checkpoint, CheckpointMeta, Container};
pub use fixtures::{generate_fixtures, FixtureSet};
pub use infer::{predict_durations, predict_pitch, synthesize_mel, Synthesis, Synthesizer};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use prepare::{prepare_training_set, Item, PrepareOptions, PrepareSummary, PreparedDataset};
pub use train::{evaluate, train, EvalReport, TrainConfig, TrainSummary};
