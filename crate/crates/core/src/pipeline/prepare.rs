//! Turns a manifest of recordings plus alignment lattices into training targets.
//!
//! Output directory layout:
//!
//! * `vocab.txt`, `features.json`, `pitch_stats.json`
//! * `index.jsonl`: id, text and split of every prepared utterance
//! * `durations.jsonl`: one [`DurationRecord`] per prepared utterance
//! * `mel/<id>.ten` (`[80, T]`) and `f0/<id>.ten` (`[T]`)

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Split};
use crate::align::{alignment_to_records, viterbi_align, DurationRecord, LogProbLattice};
use crate::audio::{compute_f0_stats, compute_log_mel, extract_f0, FeatureConfig, MelSpec, PitchStats, PitchTrack};
use crate::error::{Error, Result};
use crate::io::jsonl;
use crate::io::tensor::Tensor;
use crate::io::wav::read_wav;
use crate::text::{insert_blanks, tokenize, DurationSeq, TokenSeq, Vocab};

#[derive(Debug, Clone, Default)]
pub struct PrepareOptions {
    pub features: FeatureConfig,
    /// Worker threads; zero means one per available core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub text: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub prepared: usize,
    pub skipped: Vec<Skipped>,
    pub pitch_stats: PitchStats,
}

enum Outcome {
    Ready(DurationRecord, PitchTrack),
    Skipped(String),
}

fn prepare_one(
    m: &Manifest,
    e: &ManifestEntry,
    vocab: &Vocab,
    lattice_dir: &Path,
    out_dir: &Path,
    cfg: &FeatureConfig,
) -> Result<Outcome> {
    let lattice_path = lattice_dir.join(format!("{}.ten", e.id));
    if !lattice_path.is_file() {
        return Err(Error::MissingLattice(e.id.clone()));
    }
    let wave = read_wav(m.audio_path(e))?;
    let mel = compute_log_mel(&wave, cfg)?;
    let f0 = extract_f0(&wave, cfg)?;
    let lattice = LogProbLattice::load(&lattice_path)?;
    if lattice.frames() != mel.frames() {
        return Err(Error::FrameCountMismatch { id: e.id.clone(), lattice: lattice.frames(), mel: mel.frames() });
    }
    if lattice.vocab_size() != vocab.len() {
        return Err(Error::BadLattice(format!("{}: {} columns, vocabulary has {} symbols", e.id, lattice.vocab_size(), vocab.len())));
    }
    let target = insert_blanks(&tokenize(&e.text, vocab)?)?;
    let aligned = match viterbi_align(&lattice, &target) {
        Ok(a) => a,
        Err(err @ Error::Infeasible { .. }) => return Ok(Outcome::Skipped(err.to_string())),
        Err(err) => return Err(err),
    };
    mel.to_tensor().save(out_dir.join("mel").join(format!("{}.ten", e.id)))?;
    f0.to_tensor().save(out_dir.join("f0").join(format!("{}.ten", e.id)))?;
    Ok(Outcome::Ready(alignment_to_records(&aligned, &e.id), f0))
}

/// Vocabulary shipped with the lattices, or one built from the manifest text.
pub fn lattice_vocab(lattice_dir: &Path, manifest: &Manifest) -> Result<Vocab> {
    let path = lattice_dir.join("vocab.txt");
    if path.is_file() {
        Vocab::load(path)
    } else {
        Vocab::from_corpus(manifest.entries.iter().map(|e| e.text.as_str()))
    }
}

/// Extracts mel and F0 targets, aligns every utterance and writes the
/// prepared dataset. Utterances too short for their text are skipped with a
/// warning; every other failure aborts.
pub fn prepare_training_set(manifest: impl AsRef<Path>, lattice_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, opts: &PrepareOptions) -> Result<PrepareSummary> {
    let m = Manifest::load(manifest)?;
    let lattice_dir = lattice_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let vocab = lattice_vocab(lattice_dir, &m)?;
    std::fs::create_dir_all(out_dir.join("mel"))?;
    std::fs::create_dir_all(out_dir.join("f0"))?;

    let workers = match opts.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(m.entries.len());
    let mut results: Vec<(usize, Result<Outcome>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (m, vocab) = (&m, &vocab);
                s.spawn(move || {
                    (w..m.entries.len())
                        .step_by(workers)
                        .map(|i| (i, prepare_one(m, &m.entries[i], vocab, lattice_dir, out_dir, &opts.features)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("prepare worker panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);

    let mut records = Vec::new();
    let mut index = Vec::new();
    let mut train_f0 = Vec::new();
    let mut all_f0 = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results {
        let e = &m.entries[i];
        match r? {
            Outcome::Ready(record, f0) => {
                if e.split == Split::Train {
                    train_f0.push(f0.clone());
                }
                all_f0.push(f0);
                records.push(record);
                index.push(IndexEntry { id: e.id.clone(), text: e.text.clone(), split: e.split });
            }
            Outcome::Skipped(reason) => {
                log::warn!("skipping {}: {reason}", e.id);
                skipped.push(Skipped { id: e.id.clone(), reason });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pitch_stats = compute_f0_stats(if train_f0.is_empty() { &all_f0 } else { &train_f0 })?;
    vocab.save(out_dir.join("vocab.txt"))?;
    std::fs::write(out_dir.join("features.json"), serde_json::to_string_pretty(&opts.features)?)?;
    std::fs::write(out_dir.join("pitch_stats.json"), serde_json::to_string_pretty(&pitch_stats)?)?;
    jsonl::write(out_dir.join("index.jsonl"), &index)?;
    DurationRecord::write_all(out_dir.join("durations.jsonl"), &records)?;
    Ok(PrepareSummary { prepared: records.len(), skipped, pitch_stats })
}

/// One prepared utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub text: String,
    pub split: Split,
    pub tokens: TokenSeq,
    pub durations: DurationSeq,
    pub mel: MelSpec,
    pub f0: PitchTrack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub root: PathBuf,
    pub vocab: Vocab,
    pub pitch_stats: PitchStats,
    pub features: FeatureConfig,
    pub items: Vec<Item>,
}

impl PreparedDataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let vocab = Vocab::load(root.join("vocab.txt"))?;
        let pitch_stats: PitchStats = serde_json::from_str(&std::fs::read_to_string(root.join("pitch_stats.json"))?)?;
        let features: FeatureConfig = serde_json::from_str(&std::fs::read_to_string(root.join("features.json"))?)?;
        let index: Vec<IndexEntry> = jsonl::read(root.join("index.jsonl"))?;
        let records = DurationRecord::read_all(root.join("durations.jsonl"))?;
        if index.len() != records.len() {
            return Err(Error::LengthMismatch { expected: index.len(), actual: records.len() });
        }
        let mut items = Vec::with_capacity(index.len());
        for (e, r) in index.into_iter().zip(records) {
            if e.id != r.id {
                return Err(Error::Manifest(format!("index lists {}, durations list {}", e.id, r.id)));
            }
            let tokens = TokenSeq::blanked(r.tokens)?;
            tokens.check_vocab(&vocab)?;
            let durations = DurationSeq(r.durations);
            durations.validate_for(&tokens)?;
            let mel = MelSpec::from_tensor(Tensor::load(root.join("mel").join(format!("{}.ten", e.id)))?)?;
            let f0 = PitchTrack::from_tensor(Tensor::load(root.join("f0").join(format!("{}.ten", e.id)))?)?;
            if mel.frames() != durations.total() || f0.len() != durations.total() {
                return Err(Error::FrameCountMismatch { id: e.id, lattice: durations.total(), mel: mel.frames() });
            }
            items.push(Item { id: e.id, text: e.text, split: e.split, tokens, durations, mel, f0 });
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { root, vocab, pitch_stats, features, items })
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Validation items, or the training items when no validation split exists.
    pub fn validation(&self) -> Vec<&Item> {
        let val = self.split(Split::Val);
        if val.is_empty() {
            self.split(Split::Train)
        } else {
            val
        }
    }
}
