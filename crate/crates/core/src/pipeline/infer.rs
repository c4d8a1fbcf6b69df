//! Text to mel with the three trained networks.

use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use crate::audio::{MelSpec, PitchStats, PitchTrack};
use crate::error::{Error, Result};
use crate::models::{DurationModel, MelModel, ModelKind, PitchModel};
use crate::text::{insert_blanks, tokenize, DurationSeq, TokenSeq, Vocab};

/// Checkpoint file of `kind` inside a checkpoint directory.
pub fn checkpoint_file(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("{kind}.ckpt"))
}

/// Tokens, durations, pitch and mel for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub tokens: TokenSeq,
    pub durations: DurationSeq,
    pub pitch: PitchTrack,
    pub mel: MelSpec,
}

#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub vocab: Vocab,
    pub duration: DurationModel,
    pub pitch: PitchModel,
    pub pitch_stats: PitchStats,
    pub mel: MelModel,
}

impl Synthesizer {
    /// Loads `duration.ckpt`, `pitch.ckpt` and `mel.ckpt` from `dir`; all
    /// three must share one vocabulary.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let duration = Checkpoint::load(checkpoint_file(dir, ModelKind::Duration))?;
        let vocab = duration.meta.vocab()?;
        let pitch = Checkpoint::load_for(checkpoint_file(dir, ModelKind::Pitch), &vocab)?;
        let mel = Checkpoint::load_for(checkpoint_file(dir, ModelKind::Mel), &vocab)?;
        let (pitch, pitch_stats) = pitch.into_pitch()?;
        Ok(Self { vocab, duration: duration.into_duration()?, pitch, pitch_stats, mel: mel.into_mel()? })
    }

    pub fn tokens(&self, text: &str) -> Result<TokenSeq> {
        insert_blanks(&tokenize(text, &self.vocab)?)
    }

    pub fn predict_durations(&self, text: &str) -> Result<(TokenSeq, DurationSeq)> {
        let tokens = self.tokens(text)?;
        let durs = self.duration.predict(&tokens)?;
        Ok((tokens, durs))
    }

    pub fn predict_pitch(&self, tokens: &TokenSeq, durs: &DurationSeq) -> Result<PitchTrack> {
        durs.validate_for(tokens)?;
        self.pitch.predict(tokens, durs, &self.pitch_stats)
    }

    /// Full synthesis; `duration_scale` multiplies every predicted duration.
    pub fn synthesize(&self, text: &str, duration_scale: f64) -> Result<Synthesis> {
        Ok(self.synthesize_batch(&[text], duration_scale)?.remove(0))
    }

    pub fn synthesize_mel(&self, text: &str) -> Result<MelSpec> {
        Ok(self.synthesize(text, 1.0)?.mel)
    }

    /// Synthesizes every text in one padded batch per network.
    pub fn synthesize_batch(&self, texts: &[&str], duration_scale: f64) -> Result<Vec<Synthesis>> {
        if !(duration_scale > 0.0 && duration_scale.is_finite()) {
            return Err(Error::InvalidDurations(format!("duration scale {duration_scale} must be positive")));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let tokens = texts.iter().map(|t| self.tokens(t)).collect::<Result<Vec<_>>>()?;
        let seqs: Vec<&TokenSeq> = tokens.iter().collect();
        let durations: Vec<DurationSeq> = self
            .duration
            .predict_batch(&seqs)?
            .into_iter()
            .zip(&tokens)
            .map(|(d, t)| if duration_scale == 1.0 { d } else { d.scaled(t, duration_scale) })
            .collect();
        let dur_refs: Vec<&DurationSeq> = durations.iter().collect();
        let pitch = self.pitch.predict_batch(&seqs, &dur_refs, &self.pitch_stats)?;
        let mel = self.mel.predict_batch(&seqs, &dur_refs, &pitch.iter().collect::<Vec<_>>())?;
        Ok(tokens
            .into_iter()
            .zip(durations)
            .zip(pitch.into_iter().zip(mel))
            .map(|((tokens, durations), (pitch, mel))| Synthesis { tokens, durations, pitch, mel })
            .collect())
    }
}

/// Durations for `text` from a single duration checkpoint.
pub fn predict_durations(text: &str, checkpoint: impl AsRef<Path>) -> Result<(TokenSeq, DurationSeq)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = ckpt.meta.vocab()?;
    let model = ckpt.into_duration()?;
    let tokens = insert_blanks(&tokenize(text, &vocab)?)?;
    let durs = model.predict(&tokens)?;
    Ok((tokens, durs))
}

/// Frame pitch from a single pitch checkpoint.
pub fn predict_pitch(tokens: &TokenSeq, durs: &DurationSeq, checkpoint: impl AsRef<Path>) -> Result<PitchTrack> {
    let ckpt = Checkpoint::load(checkpoint)?;
    tokens.check_vocab(&ckpt.meta.vocab()?)?;
    let (model, stats) = ckpt.into_pitch()?;
    durs.validate_for(tokens)?;
    model.predict(tokens, durs, &stats)
}

/// Mel for `text` from a directory holding all three checkpoints.
pub fn synthesize_mel(text: &str, checkpoint_dir: impl AsRef<Path>) -> Result<MelSpec> {
    Synthesizer::load(checkpoint_dir)?.synthesize_mel(text)
}
