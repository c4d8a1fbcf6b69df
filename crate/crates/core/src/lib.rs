//! Non-autoregressive text-to-mel synthesis.
//!
//! Three feed-forward convolutional networks turn text into an 80-bin log-mel
//! spectrogram: a grapheme duration predictor, a frame-level pitch predictor
//! and a mel generator conditioned on pitch. All three are stacks of 1D
//! time-channel separable convolutions. Training targets come from the audio
//! front end ([`audio`]) and from Viterbi alignment over externally produced
//! CTC log-probability lattices ([`align`]).
//!
//! The crate is organized bottom-up:
//!
//! * [`text`] tokenization, blank interleaving and duration expansion
//! * [`audio`] log-mel and F0 extraction, corpus pitch statistics
//! * [`align`] most-probable-path CTC alignment
//! * [`nn`] the small set of differentiable kernels the networks need
//! * [`models`] the three networks and their losses
//! * [`pipeline`] dataset preparation, training, inference and benchmarking
//! * [`io`] TEN1 tensors, WAV and JSONL helpers

pub mod align;
pub mod audio;
pub mod error;
pub mod io;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod text;

pub use align::{viterbi_align, AlignmentResult, DurationRecord, LogProbLattice};
pub use audio::{
    compute_f0_stats, compute_log_mel, extract_f0, FeatureConfig, MelSpec, PitchStats,
    PitchTrack, Waveform,
};
pub use error::{Error, Result};
pub use io::tensor::Tensor;
pub use models::{DurationModel, MelModel, PitchModel};
pub use text::{expand_by_durations, insert_blanks, strip_blanks, tokenize, DurationSeq, TokenSeq, Vocab};
