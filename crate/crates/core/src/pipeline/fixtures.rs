//! A small synthetic corpus with known durations and pitch.
//!
//! Each utterance is rendered frame by frame from scripted grapheme durations:
//! letters become harmonic tones with a letter-specific spectral envelope,
//! spaces and blanks are silence. Alignment lattices are built directly from
//! the scripted durations, so preparing the corpus recovers them exactly.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::manifest::{Manifest, ManifestEntry, Split};
use super::train::TrainConfig;
use crate::align::LogProbLattice;
use crate::audio::{FeatureConfig, Waveform};
use crate::error::Result;
use crate::io::wav::write_wav;
use crate::models::ModelKind;
use crate::nn::rng_from_seed;
use crate::text::{expand_by_durations, insert_blanks, tokenize, DurationSeq, TokenSeq, Vocab, BLANK_ID};

pub const TEXTS: [&str; 10] = [
    "the cat sat",
    "a dog ran home",
    "we see the sea",
    "hello there",
    "big red box",
    "my pet fish",
    "sun and rain",
    "go to bed now",
    "it is quiet",
    "jump over it",
];

/// Off-path probability mass of the generated lattices.
pub const LATTICE_NOISE: f64 = 0.1;

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn is_silent(symbol: &str) -> bool {
    symbol.chars().all(char::is_whitespace)
}

/// Durations assigned by the generator: a per-class base length, one extra
/// frame at word starts, three frames of edge silence and a two-frame blank
/// between repeated letters.
pub fn scripted_durations(seq: &TokenSeq, vocab: &Vocab) -> DurationSeq {
    let ids = &seq.ids;
    let n = ids.len();
    let sym = |i: usize| vocab.symbol(ids[i]).unwrap_or("");
    let durs = (0..n)
        .map(|i| {
            if ids[i] == BLANK_ID {
                if i == 0 || i + 1 == n {
                    3
                } else if ids[i - 1] == ids[i + 1] {
                    2
                } else {
                    0
                }
            } else {
                let c = sym(i).chars().next().unwrap_or(' ');
                let base = if is_silent(sym(i)) {
                    5
                } else if is_vowel(c) {
                    7
                } else if c == 'y' {
                    6
                } else {
                    4
                };
                let word_start = i < 2 || is_silent(sym(i - 2));
                base + u32::from(word_start && !is_silent(sym(i)))
            }
        })
        .collect();
    DurationSeq(durs)
}

/// Target F0 of letter `c` in utterance `utt`, before declination.
fn letter_f0(utt: usize, c: char) -> f64 {
    let base = 100.0 + 12.0 * utt as f64;
    base + match c {
        'a' => 0.0,
        'e' => 15.0,
        'i' => 25.0,
        'o' => -10.0,
        'u' => -15.0,
        _ => 5.0,
    }
}

/// Relative amplitude of harmonic frequency `f` for letter `c`.
fn envelope(c: char, f: f64) -> f64 {
    let idx = (c as u32).wrapping_sub('a' as u32) as f64;
    let f1 = 300.0 + (idx * 137.0) % 600.0;
    let f2 = 900.0 + (idx * 389.0) % 1600.0;
    let g = |center: f64, width: f64| (-((f - center) / width).powi(2)).exp();
    g(f1, 150.0) + 0.7 * g(f2, 200.0) + 0.05
}

/// Renders `seq` with durations `durs` so the front end yields exactly
/// `durs.total()` frames.
pub fn render(seq: &TokenSeq, durs: &DurationSeq, vocab: &Vocab, utt: usize, cfg: &FeatureConfig) -> Result<Waveform> {
    let frames = expand_by_durations(seq, durs)?;
    let t = frames.len();
    let hop = cfg.hop_len();
    let sr = cfg.sample_rate as f64;
    let len = (t - 1) * hop + 1;
    let letter = |frame: usize| -> Option<char> {
        let s = vocab.symbol(frames.ids[frame])?;
        if frames.ids[frame] == BLANK_ID || is_silent(s) {
            None
        } else {
            s.chars().next()
        }
    };
    let mut samples = Vec::with_capacity(len);
    let (mut phase, mut f0, mut gain) = (0.0f64, letter_f0(utt, 'a'), 0.0f64);
    for n in 0..len {
        let frame = ((n as f64 / hop as f64).round() as usize).min(t - 1);
        let c = letter(frame);
        let (target_f0, target_gain) = match c {
            Some(c) => (letter_f0(utt, c) * (1.0 - 0.15 * n as f64 / len as f64), if is_vowel(c) { 0.25 } else { 0.08 }),
            None => (f0, 0.0),
        };
        f0 += 0.002 * (target_f0 - f0);
        gain += 0.01 * (target_gain - gain);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let value = match c {
            Some(c) if gain > 1e-6 => {
                let harmonics = (5000.0 / f0) as usize;
                let mut acc = 0.0;
                let mut norm = 0.0;
                for h in 1..=harmonics {
                    let a = envelope(c, h as f64 * f0) / (h as f64).sqrt();
                    acc += a * (h as f64 * phase).sin();
                    norm += a;
                }
                gain * acc / norm * 3.0
            }
            _ => 0.0,
        };
        samples.push(value as f32);
    }
    Waveform::new(samples, cfg.sample_rate)
}

/// Paths of a generated corpus.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub lattice_dir: PathBuf,
    pub vocab: Vocab,
}

impl FixtureSet {
    pub fn config_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("configs").join(format!("{kind}.json"))
    }
}

pub fn fixture_vocab() -> Vocab {
    Vocab::from_corpus(TEXTS).expect("fixture texts are non-empty")
}

/// Writes wavs, lattices, the vocabulary, a manifest and training configs
/// under `dir`.
pub fn generate_fixtures(dir: impl AsRef<Path>) -> Result<FixtureSet> {
    let root = dir.as_ref().to_path_buf();
    let lattice_dir = root.join("lattices");
    let wav_dir = root.join("wavs");
    let config_dir = root.join("configs");
    for d in [&lattice_dir, &wav_dir, &config_dir] {
        std::fs::create_dir_all(d)?;
    }
    let vocab = fixture_vocab();
    vocab.save(lattice_dir.join("vocab.txt"))?;
    let cfg = FeatureConfig::default();
    let mut entries = Vec::new();
    for (i, text) in TEXTS.iter().enumerate() {
        let id = format!("utt{i:02}");
        let seq = insert_blanks(&tokenize(text, &vocab)?)?;
        let durs = scripted_durations(&seq, &vocab);
        let wave = render(&seq, &durs, &vocab, i, &cfg)?;
        write_wav(wav_dir.join(format!("{id}.wav")), &wave)?;
        LogProbLattice::from_durations(&seq, &durs, vocab.len(), LATTICE_NOISE)?.to_tensor().save(lattice_dir.join(format!("{id}.ten")))?;
        entries.push(ManifestEntry { id, audio_path: format!("wavs/utt{i:02}.wav").into(), text: text.to_string(), split: Split::Train });
    }
    let manifest = root.join("manifest.jsonl");
    Manifest::new(&root, entries)?.save(&manifest)?;
    for kind in ModelKind::ALL {
        std::fs::write(config_dir.join(format!("{kind}.json")), serde_json::to_string_pretty(&TrainConfig::fixture())?)?;
    }
    Ok(FixtureSet { root, manifest, lattice_dir, vocab })
}

/// Random strings over the non-blank symbols of `vocab`, with lengths drawn
/// from `lens`. Leading and trailing whitespace is avoided.
pub fn random_texts(vocab: &Vocab, count: usize, lens: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<String> {
    let mut rng = rng_from_seed(seed);
    let letters: Vec<&str> = vocab.symbols()[1..].iter().map(String::as_str).filter(|s| !is_silent(s)).collect();
    let all: Vec<&str> = vocab.symbols()[1..].iter().map(String::as_str).collect();
    (0..count)
        .map(|_| {
            let n = rng.random_range(lens.clone());
            (0..n)
                .map(|j| {
                    let pool = if j == 0 || j + 1 == n { &letters } else { &all };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect()
        })
        .collect()
}
