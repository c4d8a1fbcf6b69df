//! File formats: TEN1 tensors, PCM WAV, JSONL records.

pub mod jsonl;
pub mod tensor;
pub mod wav;

pub use tensor::Tensor;
