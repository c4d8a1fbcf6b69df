//! Minibatch training of one network on a prepared dataset.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_optimizer, save_optimizer, Checkpoint};
use super::prepare::{Item, PreparedDataset};
use super::manifest::Split;
use crate::audio::PitchStats;
use crate::error::{Error, Result};
use crate::models::loss::{duration_class_objective, duration_objective, mel_objective, pitch_objective};
use crate::models::mel::pitch_batch;
use crate::models::{DurationModel, FrameInput, MelModel, ModelConfig, ModelKind, Network, TokenBatch};
use crate::nn::{adam_step, rng_from_seed, AdamConfig, CosineWarmup, Ctx, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Utterances per batch; `None` picks 256 for duration and pitch, 64 for mel.
    pub batch_size: Option<usize>,
    pub epochs: u64,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<u64>,
    pub seed: u64,
    /// Width multiplier applied to the default architecture.
    pub channel_scale: f64,
    /// Train the duration network as a 32-way classifier.
    pub classifier: bool,
    /// Replaces the dropout rate of every block when set.
    pub dropout: Option<f64>,
    /// Full architecture override; `channel_scale` and `classifier` are then ignored.
    pub model: Option<ModelConfig>,
    pub schedule: CosineWarmup,
    pub adam: AdamConfig,
    /// Steps between validation passes; zero means once per epoch.
    pub eval_every: u64,
    /// Continue from the checkpoint and optimizer state at the output path.
    pub resume: bool,
    /// End this run after the given step without changing the schedule length.
    pub stop_after: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: None,
            epochs: 200,
            steps: None,
            seed: 0,
            channel_scale: 0.25,
            classifier: false,
            dropout: None,
            model: None,
            schedule: CosineWarmup::default(),
            adam: AdamConfig::default(),
            eval_every: 0,
            resume: false,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    /// Settings that overfit the synthetic fixture corpus quickly.
    pub fn fixture() -> Self {
        Self {
            batch_size: Some(10),
            steps: Some(300),
            dropout: Some(0.0),
            schedule: CosineWarmup { lr_max: 3e-3, ..CosineWarmup::default() },
            eval_every: 50,
            ..Self::default()
        }
    }

    pub fn batch_for(&self, kind: ModelKind) -> usize {
        self.batch_size.unwrap_or(match kind {
            ModelKind::Mel => 64,
            _ => 256,
        })
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let mut cfg = match &self.model {
            Some(m) => m.clone(),
            None if kind == ModelKind::Duration && self.classifier => ModelConfig::duration_classifier().scaled(self.channel_scale),
            None => ModelConfig::for_kind(kind).scaled(self.channel_scale),
        };
        if let Some(p) = self.dropout {
            for b in &mut cfg.blocks {
                b.dropout = p;
            }
        }
        cfg
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if self.stop_after == Some(0) || self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(Error::ConfigInvalid("training needs at least one step".into()));
        }
        if self.dropout.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return Err(Error::ConfigInvalid("dropout must lie in [0, 1)".into()));
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }
}

/// Task metrics of a network on a set of utterances, in eval mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Fraction of tokens whose decoded duration is within one frame.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_within1: Option<f64>,
    /// Fraction of frames with the correct voiced or unvoiced decision.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vuv_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mel_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub steps: u64,
    pub final_loss: f64,
    pub best_step: u64,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
    /// Metrics of the saved checkpoint on the training split.
    pub train_eval: EvalReport,
}

/// Side files written next to a checkpoint at `out`.
pub fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.jsonl")
}

pub fn optimizer_path(out: &Path) -> PathBuf {
    out.with_extension("opt")
}

/// Loss (and, when `ctx` is training, gradients) for one batch.
pub fn batch_loss(net: &mut Network<f32>, items: &[&Item], stats: &PitchStats, ctx: &mut Ctx<f32>, with_grad: bool) -> Result<f64> {
    let seqs: Vec<_> = items.iter().map(|i| &i.tokens).collect();
    let batch = TokenBatch::new(&seqs)?;
    let durations: Vec<Vec<u32>> = items.iter().map(|i| i.durations.0.clone()).collect();
    let pitch: Option<Array2<f32>> = (net.config.kind == ModelKind::Mel).then(|| pitch_batch(&items.iter().map(|i| &i.f0).collect::<Vec<_>>()));
    let frames = FrameInput { durations: &durations, pitch: pitch.as_ref() };
    let (out, cache) = match net.config.kind {
        ModelKind::Duration => net.forward(&batch, None, ctx)?,
        _ => net.forward(&batch, Some(&frames), ctx)?,
    };
    let (loss, grad) = match net.config.kind {
        ModelKind::Duration => {
            let durs: Vec<&[u32]> = durations.iter().map(Vec::as_slice).collect();
            if net.config.head_channels > 1 {
                duration_class_objective(&out, &durs, &batch.mask)?
            } else {
                duration_objective(&out, &durs, &batch.mask)?
            }
        }
        ModelKind::Pitch => {
            let f0: Vec<&[f32]> = items.iter().map(|i| i.f0.f0.as_slice()).collect();
            pitch_objective(&out, &f0, stats, cache.mask())?
        }
        ModelKind::Mel => mel_objective(&out, &items.iter().map(|i| &i.mel).collect::<Vec<_>>(), cache.mask())?,
    };
    if with_grad {
        net.backward(cache, &grad);
    }
    Ok(loss)
}

/// Frame-weighted loss and task metrics over `items`.
pub fn evaluate(net: &Network<f32>, items: &[&Item], stats: &PitchStats) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let mut loss_sum = 0.0;
    let mut weight = 0.0;
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in items.chunks(16) {
        let w: usize = chunk
            .iter()
            .map(|i| match net.config.kind {
                ModelKind::Duration => i.tokens.len(),
                _ => i.durations.total(),
            })
            .sum();
        loss_sum += batch_loss(&mut net, chunk, stats, &mut Ctx::eval(), false)? * w as f64;
        weight += w as f64;
        match net.config.kind {
            ModelKind::Duration => {
                let model = DurationModel { net: net.clone() };
                let preds = model.predict_batch(&chunk.iter().map(|i| &i.tokens).collect::<Vec<_>>())?;
                for (p, i) in preds.iter().zip(chunk) {
                    hits += p.0.iter().zip(&i.durations.0).filter(|(a, b)| a.abs_diff(**b) <= 1).count();
                    total += p.len();
                }
            }
            ModelKind::Pitch => {
                let seqs: Vec<_> = chunk.iter().map(|i| &i.tokens).collect();
                let batch = TokenBatch::new(&seqs)?;
                let durations: Vec<Vec<u32>> = chunk.iter().map(|i| i.durations.0.clone()).collect();
                let (out, _) = net.forward(&batch, Some(&FrameInput { durations: &durations, pitch: None }), &mut Ctx::eval())?;
                for (b, i) in chunk.iter().enumerate() {
                    for (t, &f) in i.f0.f0.iter().enumerate() {
                        let unvoiced = out[[0, b, t]] > 0.0;
                        hits += usize::from(unvoiced == (f <= 0.0));
                        total += 1;
                    }
                }
            }
            ModelKind::Mel => {}
        }
    }
    let loss = loss_sum / weight;
    let rate = (total > 0).then(|| hits as f64 / total as f64);
    Ok(match net.config.kind {
        ModelKind::Duration => EvalReport { loss, duration_within1: rate, ..Default::default() },
        ModelKind::Pitch => EvalReport { loss, vuv_accuracy: rate, ..Default::default() },
        ModelKind::Mel => EvalReport { loss, mel_mse: Some(loss), ..Default::default() },
    })
}

/// Per-bin mean of every training frame.
fn mean_mel(items: &[&Item]) -> Vec<f32> {
    let n_mels = items[0].mel.n_mels();
    let mut sum = vec![0.0f64; n_mels];
    let mut frames = 0usize;
    for i in items {
        for (m, row) in i.mel.values.rows().into_iter().enumerate() {
            sum[m] += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        frames += i.mel.frames();
    }
    sum.into_iter().map(|s| (s / frames as f64) as f32).collect()
}

struct Metrics(std::io::BufWriter<std::fs::File>);

impl Metrics {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path)?;
        Ok(Self(std::io::BufWriter::new(f)))
    }

    fn write(&mut self, value: serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.0, &value)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

/// Trains a network of `kind` on the training split, writing the best
/// checkpoint by validation loss to `out` together with its optimizer state
/// and a metrics log.
pub fn train(kind: ModelKind, cfg: &TrainConfig, data: &PreparedDataset, out: impl AsRef<Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = out.as_ref();
    let train_items = data.split(Split::Train);
    if train_items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_items = data.validation();
    let model_cfg = cfg.model_config(kind);
    if model_cfg.kind != kind {
        return Err(Error::ConfigInvalid(format!("model override is a {} config, training {kind}", model_cfg.kind)));
    }
    let stats = data.pitch_stats;
    let batch = cfg.batch_for(kind).min(train_items.len());
    let per_epoch = train_items.len().div_ceil(batch) as u64;
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    let pitch_stats = (kind == ModelKind::Pitch).then_some(stats);

    let resuming = cfg.resume && out.is_file();
    let (mut net, mut state, adam, mut best) = if resuming {
        let ckpt = Checkpoint::load_for(out, &data.vocab)?;
        let (state, adam) = load_optimizer(optimizer_path(out), &ckpt.net.store)?;
        let best = (ckpt.meta.step, ckpt.meta.val_loss.unwrap_or(f64::INFINITY));
        (ckpt.net, state, adam, Some(best))
    } else {
        let mut net = Network::<f32>::build(&model_cfg, data.vocab.len(), cfg.seed)?;
        if kind == ModelKind::Mel {
            let mut mel = MelModel { net };
            mel.set_output_bias(&mean_mel(&train_items))?;
            net = mel.net;
        }
        let state = OptimizerState::new(&net.store);
        (net, state, cfg.adam, None)
    };
    let mut metrics = Metrics::open(&metrics_path(out), resuming)?;
    let eval_every = if cfg.eval_every == 0 { per_epoch } else { cfg.eval_every };
    let save = |net: &Network<f32>, state: &OptimizerState<f32>, step: u64, val: Option<f64>| -> Result<()> {
        Checkpoint::new(net.clone(), &data.vocab, pitch_stats, step, val).save(out)?;
        save_optimizer(optimizer_path(out), state, &adam)
    };

    let end = cfg.stop_after.map_or(total, |s| s.min(total));
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut final_loss = f64::NAN;
    for step in state.step..end {
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize * batch;
        if pos == 0 || step == state.step {
            order = (0..train_items.len()).collect();
            order.shuffle(&mut rng_from_seed(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        }
        let items: Vec<&Item> = order[pos..(pos + batch).min(order.len())].iter().map(|&i| train_items[i]).collect();
        let mut ctx = Ctx::train(cfg.seed.wrapping_add(step.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        net.store.zero_grad();
        let loss = batch_loss(&mut net, &items, &stats, &mut ctx, true)?;
        let lr = cfg.schedule.lr(step + 1, total)?;
        let grad_norm = if loss.is_finite() { adam_step(&mut net.store, &mut state, &adam, lr) } else { Err(Error::NonFinite(format!("loss {loss}"))) };
        let grad_norm = match grad_norm {
            Ok(g) => g,
            Err(Error::NonFinite(what)) => {
                // Parameters are untouched by the failed step.
                if best.is_none() {
                    save(&net, &state, step, None)?;
                }
                metrics.write(serde_json::json!({ "step": step, "error": "NonFinite", "what": what }))?;
                return Err(Error::NonFinite(format!("{what} at step {step}")));
            }
            Err(e) => return Err(e),
        };
        net.store.commit_running_stats(&mut ctx);
        final_loss = loss;
        metrics.write(serde_json::json!({ "step": step + 1, "epoch": epoch, "loss": loss, "lr": lr, "grad_norm": grad_norm }))?;

        if (step + 1) % eval_every == 0 || step + 1 == end {
            let report = evaluate(&net, &val_items, &stats)?;
            let improved = best.is_none_or(|(_, b)| report.loss < b);
            metrics.write(serde_json::json!({ "step": step + 1, "val": report, "best": improved }))?;
            if improved {
                best = Some((step + 1, report.loss));
                save(&net, &state, step + 1, Some(report.loss))?;
            }
        }
    }
    let (best_step, best_val_loss) = best.ok_or_else(|| Error::ConfigInvalid(format!("no steps left to run: resumed at {}, stopping at {end}", state.step)))?;
    let saved = Checkpoint::load(out)?;
    let train_eval = evaluate(&saved.net, &train_items, &stats)?;
    log::info!("{kind}: best validation loss {best_val_loss:.4} at step {best_step}");
    Ok(TrainSummary { kind, steps: end, final_loss, best_step, best_val_loss, checkpoint: out.to_path_buf(), train_eval })
}
