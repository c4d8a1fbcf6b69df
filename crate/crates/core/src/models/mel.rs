use ndarray::{s, Array2, Array3};

use super::loss::mel_objective;
use super::{FrameInput, ModelConfig, ModelKind, NetCache, Network, TokenBatch};
use crate::audio::{MelSpec, PitchTrack};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Real};
use crate::text::{DurationSeq, TokenSeq};

/// Generates log-mel frames from upsampled tokens and frame pitch.
#[derive(Debug, Clone)]
pub struct MelModel<F = f32> {
    pub net: Network<F>,
}

/// Right-pads pitch tracks into a `[B, T]` array.
pub fn pitch_batch<F: Real>(tracks: &[&PitchTrack]) -> Array2<F> {
    let t = tracks.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut out = Array2::<F>::zeros((tracks.len(), t));
    for (b, p) in tracks.iter().enumerate() {
        for (i, &f) in p.f0.iter().enumerate() {
            out[[b, i]] = F::of(f as f64);
        }
    }
    out
}

impl<F: Real> MelModel<F> {
    pub fn build(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Mel {
            return Err(Error::ConfigInvalid(format!("expected a mel config, got {}", config.kind)));
        }
        Ok(Self { net: Network::build(config, vocab_size, seed)? })
    }

    /// `[80, B, T]` log-mel frames.
    pub fn forward(&self, tokens: &TokenBatch, durations: &[Vec<u32>], pitch: &Array2<F>, ctx: &mut Ctx<F>) -> Result<(Array3<F>, NetCache<F>)> {
        self.net.forward(tokens, Some(&FrameInput { durations, pitch: Some(pitch) }), ctx)
    }

    pub fn backward(&mut self, cache: NetCache<F>, dout: &Array3<F>) {
        self.net.backward(cache, dout)
    }

    pub fn objective(&self, out: &Array3<F>, truth: &[&MelSpec], cache: &NetCache<F>) -> Result<(f64, Array3<F>)> {
        mel_objective(out, truth, cache.mask())
    }

    /// Sets the output bias, typically to the per-bin mean of the training set.
    pub fn set_output_bias(&mut self, bias: &[f32]) -> Result<()> {
        let entry = self
            .net
            .store
            .entries_mut()
            .iter_mut()
            .find(|e| e.name == "head.bias")
            .expect("mel head has a bias");
        if entry.value.len() != bias.len() {
            return Err(Error::LengthMismatch { expected: entry.value.len(), actual: bias.len() });
        }
        for (v, &b) in entry.value.iter_mut().zip(bias) {
            *v = F::of(b as f64);
        }
        Ok(())
    }

    pub fn predict_batch(&self, seqs: &[&TokenSeq], durs: &[&DurationSeq], pitch: &[&PitchTrack]) -> Result<Vec<MelSpec>> {
        let batch = TokenBatch::new(seqs)?;
        let durations: Vec<Vec<u32>> = durs.iter().map(|d| d.0.clone()).collect();
        for (d, p) in durs.iter().zip(pitch) {
            if d.total() != p.len() {
                return Err(Error::LengthMismatch { expected: d.total(), actual: p.len() });
            }
        }
        let (out, cache) = self.forward(&batch, &durations, &pitch_batch(pitch), &mut Ctx::eval())?;
        Ok((0..seqs.len())
            .map(|b| {
                let t = cache.mask().len_of(b);
                MelSpec { values: out.slice(s![.., b, ..t]).mapv(|v| v.as_f64() as f32) }
            })
            .collect())
    }

    pub fn predict(&self, seq: &TokenSeq, durs: &DurationSeq, pitch: &PitchTrack) -> Result<MelSpec> {
        Ok(self.predict_batch(&[seq], &[durs], &[pitch])?.remove(0))
    }

    pub fn count_params(&self) -> usize {
        self.net.count_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MelModel<f32> {
        MelModel::build(&ModelConfig::mel().scaled(1.0 / 16.0), 9, 2).unwrap()
    }

    #[test]
    fn output_shape_follows_durations() {
        let m = model();
        let seq = TokenSeq::blanked(vec![0, 2, 0, 3, 0]).unwrap();
        for durs in [vec![0, 1, 0, 1, 0], vec![2, 5, 1, 3, 4]] {
            let durs = DurationSeq(durs);
            let pitch = PitchTrack { f0: vec![120.0; durs.total()] };
            let mel = m.predict(&seq, &durs, &pitch).unwrap();
            assert_eq!(mel.values.dim(), (80, durs.total()));
            assert!(mel.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_pitch_adds_only_projection_bias() {
        let m = MelModel::<f64>::build(&ModelConfig::mel().scaled(1.0 / 16.0), 9, 2).unwrap();
        let seq = TokenSeq::plain(vec![1, 4, 2]);
        let batch = TokenBatch::single(&seq).unwrap();
        let durations = vec![vec![2, 1, 3]];
        let emb = m.net.embed_tokens(&batch).unwrap();
        let up = crate::nn::GaussianUpsample::<f64>::new(&durations, &batch.mask).unwrap().forward(&emb);
        let bias = m.net.store.find("pitch_proj.bias").unwrap().value.clone();

        let expected = up + &bias.into_dimensionality::<ndarray::Ix1>().unwrap().insert_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(2));
        let (want, _, _) = m.net.forward_features(expected, &crate::nn::SeqMask::full(1, 6), &mut Ctx::eval());
        let (got, _) = m.forward(&batch, &durations, &Array2::zeros((1, 6)), &mut Ctx::eval()).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn pitch_length_must_match() {
        let m = model();
        let seq = TokenSeq::plain(vec![1]);
        let err = m.predict(&seq, &DurationSeq(vec![3]), &PitchTrack { f0: vec![0.0; 2] }).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }
}
