//! Deterministic inputs for the criterion benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use talknet::text::{insert_blanks, BLANK_ID};
use talknet::{DurationSeq, FeatureConfig, LogProbLattice, PitchTrack, TokenSeq, Waveform};

/// Vowel-like harmonic tone of `secs` seconds at the default sample rate.
pub fn tone(secs: f64, f0: f64) -> Waveform {
    let sr = FeatureConfig::default().sample_rate;
    let n = (secs * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (1..=5).map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() as f32 * 0.2
        })
        .collect();
    Waveform::new(samples, sr).expect("valid waveform")
}

/// Blank-interleaved sequence of `chars` random non-blank ids below `vocab`.
pub fn tokens(chars: usize, vocab: usize, seed: u64) -> TokenSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..chars).map(|_| rng.random_range(1..vocab as u32)).collect();
    insert_blanks(&TokenSeq::plain(ids)).expect("non-empty sequence")
}

/// Durations that give every character `frames` frames and blanks none.
pub fn durations(seq: &TokenSeq, frames: u32) -> DurationSeq {
    DurationSeq(seq.ids.iter().map(|&id| if id == BLANK_ID { 0 } else { frames }).collect())
}

/// Constant 120 Hz pitch over `frames` frames.
pub fn pitch(frames: usize) -> PitchTrack {
    PitchTrack { f0: vec![120.0; frames] }
}

/// Random log-softmax lattice of `frames` rows over `vocab` symbols.
pub fn lattice(frames: usize, vocab: usize, seed: u64) -> LogProbLattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::from_shape_simple_fn((frames, vocab), || rng.random_range(-4.0f32..0.0));
    for mut row in values.rows_mut() {
        let lse = row.iter().map(|v| v.exp()).sum::<f32>().ln();
        row -= lse;
    }
    LogProbLattice::new(values).expect("valid lattice")
}
