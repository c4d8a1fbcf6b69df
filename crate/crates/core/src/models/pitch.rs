use ndarray::{s, Array3};

use super::loss::pitch_objective;
use super::{FrameInput, ModelConfig, ModelKind, NetCache, Network, TokenBatch};
use crate::audio::{PitchStats, PitchTrack};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Real};
use crate::text::{DurationSeq, TokenSeq};

/// Lowest and highest F0 the pitch predictor will emit for a voiced frame.
pub const F0_RANGE: (f32, f32) = (65.0, 400.0);

/// Predicts an unvoiced logit and a normalised pitch value for every frame.
#[derive(Debug, Clone)]
pub struct PitchModel<F = f32> {
    pub net: Network<F>,
}

impl<F: Real> PitchModel<F> {
    pub fn build(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Pitch {
            return Err(Error::ConfigInvalid(format!("expected a pitch config, got {}", config.kind)));
        }
        Ok(Self { net: Network::build(config, vocab_size, seed)? })
    }

    /// `[2, B, T]`: channel 0 is the unvoiced logit, channel 1 the normalised pitch.
    pub fn forward(&self, tokens: &TokenBatch, durations: &[Vec<u32>], ctx: &mut Ctx<F>) -> Result<(Array3<F>, NetCache<F>)> {
        self.net.forward(tokens, Some(&FrameInput { durations, pitch: None }), ctx)
    }

    pub fn backward(&mut self, cache: NetCache<F>, dout: &Array3<F>) {
        self.net.backward(cache, dout)
    }

    pub fn objective(&self, out: &Array3<F>, f0: &[&[f32]], stats: &PitchStats, cache: &NetCache<F>) -> Result<(f64, Array3<F>)> {
        pitch_objective(out, f0, stats, cache.mask())
    }

    /// Frame pitch in Hz: zero where the unvoiced probability exceeds one
    /// half, otherwise the denormalised value clamped to [`F0_RANGE`].
    pub fn predict_batch(&self, seqs: &[&TokenSeq], durs: &[&DurationSeq], stats: &PitchStats) -> Result<Vec<PitchTrack>> {
        let batch = TokenBatch::new(seqs)?;
        let durations: Vec<Vec<u32>> = durs.iter().map(|d| d.0.clone()).collect();
        let (out, cache) = self.forward(&batch, &durations, &mut Ctx::eval())?;
        Ok((0..seqs.len())
            .map(|b| {
                let t = cache.mask().len_of(b);
                let logits = out.slice(s![0, b, ..t]);
                let body = out.slice(s![1, b, ..t]);
                let f0 = logits
                    .iter()
                    .zip(body)
                    .map(|(&z, &p)| {
                        // sigmoid(z) > 0.5 exactly when z > 0.
                        if z.as_f64() > 0.0 {
                            0.0
                        } else {
                            stats.denormalize(p.as_f64() as f32).clamp(F0_RANGE.0, F0_RANGE.1)
                        }
                    })
                    .collect();
                PitchTrack { f0 }
            })
            .collect())
    }

    pub fn predict(&self, seq: &TokenSeq, durs: &DurationSeq, stats: &PitchStats) -> Result<PitchTrack> {
        Ok(self.predict_batch(&[seq], &[durs], stats)?.remove(0))
    }

    pub fn count_params(&self) -> usize {
        self.net.count_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DurationModel;

    fn model() -> PitchModel<f32> {
        PitchModel::build(&ModelConfig::pitch().scaled(1.0 / 16.0), 9, 5).unwrap()
    }

    #[test]
    fn frame_level_outputs() {
        let m = model();
        let seq = TokenSeq::blanked(vec![0, 2, 0, 3, 0]).unwrap();
        let durs = DurationSeq(vec![1, 3, 0, 4, 2]);
        let stats = PitchStats { mu_f0: 180.0, sigma_f0: 30.0 };
        let track = m.predict(&seq, &durs, &stats).unwrap();
        assert_eq!(track.len(), 10);
        assert!(track.f0.iter().all(|&f| f == 0.0 || (F0_RANGE.0..=F0_RANGE.1).contains(&f)));
        assert_eq!(m.predict(&seq, &durs, &stats).unwrap(), track);
    }

    #[test]
    fn confident_unvoiced_gives_silence() {
        let mut m = model();
        let head_bias = m.net.store.entries().iter().position(|e| e.name == "head.bias").unwrap();
        m.net.store.entries_mut()[head_bias].value[[0]] = 1e6;
        let seq = TokenSeq::plain(vec![1, 2]);
        let t = m.predict(&seq, &DurationSeq(vec![2, 3]), &PitchStats { mu_f0: 100.0, sigma_f0: 10.0 }).unwrap();
        assert_eq!(t.f0, vec![0.0; 5]);
    }

    #[test]
    fn trunk_matches_duration_trunk() {
        for scale in [1.0 / 16.0, 1.0] {
            let d = DurationModel::<f32>::build(&ModelConfig::duration().scaled(scale), 40, 0).unwrap();
            let p = PitchModel::<f32>::build(&ModelConfig::pitch().scaled(scale), 40, 0).unwrap();
            assert_eq!(d.net.trunk_params(), p.net.trunk_params());
        }
    }
}
