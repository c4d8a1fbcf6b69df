use ndarray::{s, Array3};

use super::loss::{decode_duration_classes, decode_durations, duration_class_objective, duration_objective};
use super::{ModelConfig, ModelKind, NetCache, Network, TokenBatch};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Real};
use crate::text::{DurationSeq, TokenSeq};

/// Predicts a log-duration (or duration class logits) for every token.
#[derive(Debug, Clone)]
pub struct DurationModel<F = f32> {
    pub net: Network<F>,
}

impl<F: Real> DurationModel<F> {
    pub fn build(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Duration {
            return Err(Error::ConfigInvalid(format!("expected a duration config, got {}", config.kind)));
        }
        Ok(Self { net: Network::build(config, vocab_size, seed)? })
    }

    pub fn is_classifier(&self) -> bool {
        self.net.config.head_channels > 1
    }

    /// `[head, B, N]` outputs for a token batch.
    pub fn forward(&self, tokens: &TokenBatch, ctx: &mut Ctx<F>) -> Result<(Array3<F>, NetCache<F>)> {
        self.net.forward(tokens, None, ctx)
    }

    pub fn backward(&mut self, cache: NetCache<F>, dout: &Array3<F>) {
        self.net.backward(cache, dout)
    }

    /// Training loss and its gradient for the network output.
    pub fn objective(&self, out: &Array3<F>, durs: &[&[u32]], tokens: &TokenBatch) -> Result<(f64, Array3<F>)> {
        if self.is_classifier() {
            duration_class_objective(out, durs, &tokens.mask)
        } else {
            duration_objective(out, durs, &tokens.mask)
        }
    }

    /// Decoded durations for every sequence of a batch, in eval mode.
    pub fn predict_batch(&self, seqs: &[&TokenSeq]) -> Result<Vec<DurationSeq>> {
        let batch = TokenBatch::new(seqs)?;
        let (out, _) = self.forward(&batch, &mut Ctx::eval())?;
        seqs.iter()
            .enumerate()
            .map(|(b, seq)| {
                let o = out.slice(s![.., b, ..seq.len()]).mapv(|v| v.as_f64());
                if self.is_classifier() {
                    decode_duration_classes(o.view(), seq)
                } else {
                    decode_durations(&o.row(0).to_vec(), seq)
                }
            })
            .collect()
    }

    pub fn predict(&self, seq: &TokenSeq) -> Result<DurationSeq> {
        Ok(self.predict_batch(&[seq])?.remove(0))
    }

    pub fn count_params(&self) -> usize {
        self.net.count_params()
    }
}
