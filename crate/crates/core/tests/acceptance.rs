//! Acceptance suite: one PASS or FAIL line per criterion.
//!
//! Runs as a plain binary so the lines reach the terminal uncaptured.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use talknet::audio::{compute_log_mel, extract_f0, FeatureConfig, PitchStats, PitchTrack, Waveform};
use talknet::models::gradcheck::{check_model, locality_probe};
use talknet::models::loss::{duration_loss, mel_loss, pitch_loss};
use talknet::models::{DurationModel, MelModel, ModelConfig, ModelKind, Network, PitchModel};
use talknet::nn::gradcheck::{check_layer, LayerKind};
use talknet::pipeline::fixtures::random_texts;
use talknet::pipeline::infer::checkpoint_file;
use talknet::pipeline::{benchmark_rtf, generate_fixtures, linear_fit, prepare_training_set, train, PrepareOptions, PreparedDataset, Synthesizer, TrainConfig};
use talknet::text::BLANK_ID;
use talknet::MelSpec;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Vocabulary size of a typical English grapheme inventory plus the blank.
const FULL_VOCAB: usize = 40;

fn parameter_counts() -> Outcome {
    let d = DurationModel::<f32>::build(&ModelConfig::duration(), FULL_VOCAB, 0).map_err(|e| e.to_string())?.count_params();
    let p = PitchModel::<f32>::build(&ModelConfig::pitch(), FULL_VOCAB, 0).map_err(|e| e.to_string())?.count_params();
    let m = MelModel::<f32>::build(&ModelConfig::mel(), FULL_VOCAB, 0).map_err(|e| e.to_string())?.count_params();
    let total = d + p + m;
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.15 * target;
    check(
        within(d, 2.3e6) && within(m, 8.5e6) && within(total, 13.2e6),
        format!("duration {d}, pitch {p}, mel {m}, total {total}"),
    )
}

fn viterbi_oracle() -> Outcome {
    let t = common::run_viterbi_oracle(1000);
    check(
        t.mismatches.is_empty() && t.matched == 1000 && t.sums_ok == t.feasible,
        format!("{}/{} match exhaustive search, {} feasible, durations sum to T in {}/{}, mismatched seeds {:?}", t.matched, t.cases, t.feasible, t.sums_ok, t.feasible, t.mismatches),
    )
}

fn gradients() -> Outcome {
    let mut worst_layer = (0.0f64, String::new());
    for kind in LayerKind::ALL {
        for seed in 0..3 {
            let r = check_layer(kind, seed);
            if r.max_rel_error >= worst_layer.0 {
                worst_layer = (r.max_rel_error, format!("{} seed {seed}", kind.name()));
            }
        }
    }
    let mut worst_model = (0.0f64, String::new());
    for kind in ModelKind::ALL {
        for seed in 0..3 {
            let r = check_model(kind, seed, Some(4));
            if r.max_rel_error >= worst_model.0 {
                worst_model = (r.max_rel_error, format!("{kind} seed {seed}"));
            }
        }
    }
    check(
        worst_layer.0 < 1e-4 && worst_model.0 < 1e-3,
        format!("worst layer {:.2e} ({}), worst network {:.2e} ({})", worst_layer.0, worst_layer.1, worst_model.0, worst_model.1),
    )
}

struct Trained {
    _dir: tempfile::TempDir,
    ckpt_dir: PathBuf,
}

fn fixture_overfit(trained: &mut Option<Trained>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let start = Instant::now();
    let fx = generate_fixtures(root.join("fx")).map_err(|e| e.to_string())?;
    prepare_training_set(&fx.manifest, &fx.lattice_dir, root.join("prep"), &PrepareOptions { workers: 1, ..Default::default() }).map_err(|e| e.to_string())?;
    let data = PreparedDataset::load(root.join("prep")).map_err(|e| e.to_string())?;
    let ckpt_dir = root.join("ckpt");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::fixture();
    let mut results = Vec::new();
    for kind in ModelKind::ALL {
        let s = train(kind, &cfg, &data, checkpoint_file(&ckpt_dir, kind)).map_err(|e| e.to_string())?;
        results.push(s);
    }
    let elapsed = start.elapsed();
    let within1 = results[0].train_eval.duration_within1.unwrap_or(0.0);
    let vuv = results[1].train_eval.vuv_accuracy.unwrap_or(0.0);
    let mse = results[2].train_eval.mel_mse.unwrap_or(f64::INFINITY);
    let steps_ok = results[0].steps <= 300 && results[2].steps <= 500;
    *trained = Some(Trained { _dir: dir, ckpt_dir });
    check(
        within1 >= 0.95 && vuv >= 0.95 && mse < 0.05 && steps_ok && elapsed < Duration::from_secs(600),
        format!(
            "duration within-1 {:.3} after {} steps, pitch V/UV {:.3} after {} steps, mel MSE {:.4} after {} steps, {:.0}s total",
            within1,
            results[0].steps,
            vuv,
            results[1].steps,
            mse,
            results[2].steps,
            elapsed.as_secs_f64()
        ),
    )
}

fn best_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn non_autoregressive(ckpt_dir: &Path) -> Outcome {
    let synth = Synthesizer::load(ckpt_dir).map_err(|e| e.to_string())?;
    // Wall time against output frames over a 4x range of input lengths.
    let (mut frames, mut secs) = (Vec::new(), Vec::new());
    for (i, len) in (15..=60).step_by(5).enumerate() {
        for text in random_texts(&synth.vocab, 2, len..=len, 100 + i as u64) {
            let n = synth.synthesize(&text, 1.0).map_err(|e| e.to_string())?.mel.frames();
            let t = best_time(5, || {
                synth.synthesize(&text, 1.0).expect("synthesis");
            });
            frames.push(n as f64);
            secs.push(t);
        }
    }
    let (slope, _, r2) = linear_fit(&frames, &secs);
    let span = frames.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / frames.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut local = Vec::new();
    for kind in ModelKind::ALL {
        let radius = Network::<f32>::build(&ModelConfig::for_kind(kind).scaled(0.25), 12, 0).map_err(|e| e.to_string())?.receptive_radius();
        let frames = 2 * radius + 20;
        let target = radius + 5;
        let (a, b) = locality_probe(kind, frames, target, radius + 1, 0);
        let unchanged = a.slice(ndarray::s![.., 0, target]) == b.slice(ndarray::s![.., 0, target]);
        let (c, d) = locality_probe(kind, frames, target, radius / 2, 0);
        let moved = c.slice(ndarray::s![.., 0, target]) != d.slice(ndarray::s![.., 0, target]);
        local.push((kind, radius, unchanged && moved));
    }
    let locality_ok = local.iter().all(|l| l.2);

    let texts = random_texts(&synth.vocab, 16, 40..=40, 7);
    let fc = FeatureConfig::default();
    // Alternate the two batch sizes so both see the same machine load.
    let (mut rtf1, mut rtf4) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        rtf1 = rtf1.max(benchmark_rtf(&synth, &texts, 1, &fc).map_err(|e| e.to_string())?.rtf);
        rtf4 = rtf4.max(benchmark_rtf(&synth, &texts, 4, &fc).map_err(|e| e.to_string())?.rtf);
    }
    check(
        r2 >= 0.9 && span >= 4.0 && slope > 0.0 && locality_ok && rtf4 >= rtf1,
        format!(
            "R^2 {r2:.3} over {span:.1}x frame range, locality {}, RTF batch 1 {rtf1:.1}, batch 4 {rtf4:.1}",
            local.iter().map(|(k, r, ok)| format!("{k} R={r} {}", if *ok { "ok" } else { "broken" })).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn mel_bits(m: &MelSpec) -> Vec<u32> {
    m.values.iter().map(|v| v.to_bits()).collect()
}

fn pipeline_invariants(ckpt_dir: &Path) -> Outcome {
    let synth = Synthesizer::load(ckpt_dir).map_err(|e| e.to_string())?;
    let again = Synthesizer::load(ckpt_dir).map_err(|e| e.to_string())?;
    let texts = random_texts(&synth.vocab, 100, 1..=40, 11);
    let (mut frames_ok, mut floor_ok, mut repeat_ok) = (0, 0, 0);
    for text in &texts {
        let a = synth.synthesize(text, 1.0).map_err(|e| e.to_string())?;
        let (tokens, durs) = synth.predict_durations(text).map_err(|e| e.to_string())?;
        frames_ok += usize::from(a.mel.frames() == durs.total() && a.durations == durs && a.tokens == tokens);
        floor_ok += usize::from(tokens.ids.iter().zip(&durs.0).all(|(&id, &d)| id == BLANK_ID || d >= 1));
        let b = again.synthesize(text, 1.0).map_err(|e| e.to_string())?;
        repeat_ok += usize::from(mel_bits(&a.mel) == mel_bits(&b.mel) && a.pitch == b.pitch);
    }
    let n = texts.len();
    check(
        frames_ok == n && floor_ok == n && repeat_ok == n,
        format!("{n} texts: frames = sum of durations {frames_ok}/{n}, non-blank floor {floor_ok}/{n}, bitwise repeatable {repeat_ok}/{n}"),
    )
}

fn front_end() -> Outcome {
    let cfg = FeatureConfig::default();
    let sr = cfg.sample_rate as usize;
    let sine = Waveform::new((0..sr).map(|n| (0.5 * (2.0 * std::f64::consts::PI * 220.0 * n as f64 / sr as f64).sin()) as f32).collect(), cfg.sample_rate).map_err(|e| e.to_string())?;
    let f0 = extract_f0(&sine, &cfg).map_err(|e| e.to_string())?;
    let half = cfg.window_len() / 2;
    let interior: Vec<f32> = (0..f0.len()).filter(|&t| t * cfg.hop_len() >= half && t * cfg.hop_len() + half < sr).map(|t| f0.f0[t]).collect();
    let worst = interior.iter().map(|f| (f - 220.0).abs()).fold(0.0f32, f32::max);
    let sine_ok = !interior.is_empty() && worst <= 5.0;

    let silence = Waveform::new(vec![0.0; sr], cfg.sample_rate).map_err(|e| e.to_string())?;
    let silent_ok = extract_f0(&silence, &cfg).map_err(|e| e.to_string())?.f0.iter().all(|&f| f == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts_ok = 0;
    for _ in 0..50 {
        let len = rng.random_range(cfg.window_len()..3 * sr);
        let freq = rng.random_range(80.0..350.0);
        let wave = Waveform::new((0..len).map(|n| (0.3 * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin()) as f32 + rng.random_range(-0.01..0.01)).collect(), cfg.sample_rate).map_err(|e| e.to_string())?;
        let mel = compute_log_mel(&wave, &cfg).map_err(|e| e.to_string())?;
        let f0 = extract_f0(&wave, &cfg).map_err(|e| e.to_string())?;
        counts_ok += usize::from(mel.frames() == f0.len() && f0.len() == cfg.num_frames(len));
    }

    let d = duration_loss(&[0.0, 0.0], &[1, 0], &[true, true]).map_err(|e| e.to_string())?;
    let d_expected = 2f64.ln().powi(2) / 2.0;
    let stats = PitchStats { mu_f0: 150.0, sigma_f0: 50.0 };
    let logit = 9f64.ln();
    let p = pitch_loss(&[logit, -logit], &[0.0, 0.5], &PitchTrack { f0: vec![0.0, 200.0] }, &stats).map_err(|e| e.to_string())?;
    let p_expected = -(0.9f64.ln() + 0.9f64.ln()) / 2.0 + 0.25;
    let truth = MelSpec { values: ndarray::Array2::from_shape_fn((80, 6), |(m, t)| (m as f32 - t as f32) * 0.1) };
    let pred = MelSpec { values: &truth.values + 0.5 };
    let m = mel_loss(&pred, &truth, &[true; 6]).map_err(|e| e.to_string())?;
    let losses_ok = (d - d_expected).abs() < 1e-6 && (p - p_expected).abs() < 1e-6 && (m - 0.25).abs() < 1e-6;

    check(
        sine_ok && silent_ok && counts_ok == 50 && losses_ok,
        format!(
            "220 Hz worst error {worst:.3} Hz over {} interior frames, silence unvoiced {silent_ok}, frame counts agree {counts_ok}/50, duration loss {d:.7}, pitch loss {p:.7}, mel loss {m:.7}",
            interior.len()
        ),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{status} criterion {n} ({name}): {detail} [{secs:.1}s]");
    outcome.is_ok()
}

fn main() {
    let mut trained = None;
    let mut ok = true;
    ok &= run(1, "parameter counts", parameter_counts);
    ok &= run(2, "Viterbi oracle", viterbi_oracle);
    ok &= run(3, "gradient checks", gradients);
    ok &= run(4, "fixture overfit", || fixture_overfit(&mut trained));
    let ckpt = trained.as_ref().map(|t| t.ckpt_dir.clone());
    let needs_models = |f: fn(&Path) -> Outcome| {
        let ckpt = ckpt.clone();
        move || ckpt.as_deref().map_or(Err("no trained models".to_string()), f)
    };
    ok &= run(5, "non-autoregressive structure", needs_models(non_autoregressive));
    ok &= run(6, "pipeline invariants", needs_models(pipeline_invariants));
    ok &= run(7, "feature front end", front_end);
    if !ok {
        std::process::exit(1);
    }
}
