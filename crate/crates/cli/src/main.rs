use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use talknet::align::{alignment_to_records, viterbi_align, LogProbLattice};
use talknet::audio::FeatureConfig;
use talknet::models::gradcheck::check_model;
use talknet::models::ModelKind;
use talknet::nn::gradcheck::{check_layer, LayerKind};
use talknet::pipeline::fixtures::random_texts;
use talknet::pipeline::{benchmark_rtf, generate_fixtures, prepare_training_set, train, PrepareOptions, PreparedDataset, Synthesizer, TrainConfig};
use talknet::text::{insert_blanks, tokenize, Vocab};
use talknet::Error;

/// Text-to-mel synthesis with three convolutional networks.
#[derive(Parser)]
#[command(name = "talknet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features and alignments for every manifest utterance.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lattices: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train one network on a prepared dataset.
    Train {
        kind: ModelKind,
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a mel spectrogram and write it as a TEN1 tensor.
    Infer {
        #[arg(long)]
        text: String,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        durations_scale: f64,
    },
    /// Viterbi-align text against a CTC log-probability lattice.
    Align {
        #[arg(long)]
        lattice: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and network.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Measure the real-time factor of mel synthesis.
    Bench {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// One text per line; random texts over the vocabulary when omitted.
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
    /// Generate the synthetic fixture corpus.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure reported as JSON on stderr.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare { manifest, lattices, out, workers } => {
            let summary = prepare_training_set(&manifest, &lattices, &out, &PrepareOptions { workers, ..Default::default() })?;
            print(&json!(summary));
        }
        Command::Train { kind, data, config, out } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let data = PreparedDataset::load(&data)?;
            let summary = train(kind, &cfg, &data, &out)?;
            print(&json!(summary));
        }
        Command::Infer { text, ckpt_dir, out, durations_scale } => {
            let synth = Synthesizer::load(&ckpt_dir)?;
            let s = synth.synthesize(&text, durations_scale)?;
            s.mel.to_tensor().save(&out).map_err(Failure::from)?;
            print(&json!({
                "frames": s.mel.frames(),
                "tokens": s.tokens.ids,
                "durations": s.durations.0,
                "voiced_frames": s.pitch.voiced_count(),
                "out": out,
            }));
        }
        Command::Align { lattice, text, vocab } => {
            let vocab = Vocab::load(vocab)?;
            let lattice = LogProbLattice::load(&lattice)?;
            let target = insert_blanks(&tokenize(&text, &vocab)?)?;
            let result = viterbi_align(&lattice, &target)?;
            print(&json!(alignment_to_records(&result, "cli")));
        }
        Command::Gradcheck { seeds } => {
            let mut failed = Vec::new();
            for kind in LayerKind::ALL {
                for seed in 0..seeds {
                    let r = check_layer(kind, seed);
                    let pass = r.max_rel_error < 1e-4;
                    println!("{}", json!({ "target": kind.name(), "seed": seed, "pass": pass, "report": r }));
                    if !pass {
                        failed.push(format!("{} seed {seed}", kind.name()));
                    }
                }
            }
            for kind in ModelKind::ALL {
                for seed in 0..seeds {
                    let r = check_model(kind, seed, Some(4));
                    let pass = r.max_rel_error < 1e-3;
                    println!("{}", json!({ "target": format!("{kind} network"), "seed": seed, "pass": pass, "report": r }));
                    if !pass {
                        failed.push(format!("{kind} network seed {seed}"));
                    }
                }
            }
            if !failed.is_empty() {
                return Err(Failure { kind: "GradCheckFailed", message: failed.join(", ") });
            }
        }
        Command::Bench { ckpt_dir, batch, texts, count } => {
            let synth = Synthesizer::load(&ckpt_dir)?;
            let texts = match texts {
                Some(p) => std::fs::read_to_string(p).map_err(Error::from)?.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect(),
                None => random_texts(&synth.vocab, count, 20..=80, 0),
            };
            let report = benchmark_rtf(&synth, &texts, batch, &FeatureConfig::default())?;
            print(&json!(report));
        }
        Command::Fixtures { out } => {
            let set = generate_fixtures(&out)?;
            print(&json!({ "manifest": set.manifest, "lattices": set.lattice_dir, "vocab_size": set.vocab.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}
