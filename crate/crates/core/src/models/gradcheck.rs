//! End-to-end gradient checks of the assembled networks on tiny shapes.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::loss::{duration_objective, mel_objective, pitch_objective};
use super::mel::pitch_batch;
use super::{FrameInput, ModelConfig, ModelKind, Network, TokenBatch};
use crate::audio::{MelSpec, PitchStats, PitchTrack};
use crate::nn::gradcheck::{finite_diff_gradcheck, GradCheckOptions, GradCheckReport};
use crate::nn::{rng_from_seed, Ctx};
use crate::text::TokenSeq;

/// Channel scale used for the end-to-end checks.
pub const TINY_SCALE: f64 = 1.0 / 64.0;

struct Example {
    tokens: Vec<TokenSeq>,
    durations: Vec<Vec<u32>>,
    f0: Vec<PitchTrack>,
    mel: Vec<MelSpec>,
}

fn random_example(rng: &mut impl Rng, vocab: usize) -> Example {
    let mut tokens = Vec::new();
    let mut durations = Vec::new();
    for graphemes in [3usize, 2] {
        let mut ids = vec![0u32];
        let mut durs = vec![rng.random_range(0..2)];
        for _ in 0..graphemes {
            ids.push(rng.random_range(1..vocab as u32));
            ids.push(0);
            durs.push(rng.random_range(1..4));
            durs.push(rng.random_range(0..2));
        }
        tokens.push(TokenSeq::blanked(ids).expect("blank layout"));
        durations.push(durs);
    }
    let f0 = durations
        .iter()
        .map(|d| {
            let t: u32 = d.iter().sum();
            PitchTrack { f0: (0..t).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(80.0..300.0) }).collect() }
        })
        .collect::<Vec<_>>();
    let mel = f0
        .iter()
        .map(|p| MelSpec { values: Array2::from_shape_simple_fn((80, p.len()), || rng.random_range(-2.0..2.0)) })
        .collect();
    Example { tokens, durations, f0, mel }
}

/// Loss of one training-mode forward pass, with gradients when asked.
fn run_objective(net: &mut Network<f64>, kind: ModelKind, ex: &Example, seed: u64, with_grad: bool) -> (f64, Option<u64>) {
    let seqs: Vec<&TokenSeq> = ex.tokens.iter().collect();
    let batch = TokenBatch::new(&seqs).expect("non-empty batch");
    let mut ctx = Ctx::train(seed).track_kinks();
    let pitch: Array2<f64> = pitch_batch(&ex.f0.iter().collect::<Vec<_>>());
    let frames = FrameInput { durations: &ex.durations, pitch: Some(&pitch) };
    let (out, cache) = match kind {
        ModelKind::Duration => net.forward(&batch, None, &mut ctx),
        _ => net.forward(&batch, Some(&frames), &mut ctx),
    }
    .expect("forward");
    let (loss, grad) = match kind {
        ModelKind::Duration => {
            let durs: Vec<&[u32]> = ex.durations.iter().map(Vec::as_slice).collect();
            duration_objective(&out, &durs, &batch.mask)
        }
        ModelKind::Pitch => {
            let f0: Vec<&[f32]> = ex.f0.iter().map(|p| p.f0.as_slice()).collect();
            pitch_objective(&out, &f0, &PitchStats { mu_f0: 160.0, sigma_f0: 40.0 }, cache.mask())
        }
        ModelKind::Mel => mel_objective(&out, &ex.mel.iter().collect::<Vec<_>>(), cache.mask()),
    }
    .expect("objective");
    if with_grad {
        net.backward(cache, &grad);
    }
    (loss, ctx.kink_hash())
}

fn build(kind: ModelKind, vocab: usize, seed: u64) -> Network<f64> {
    let cfg = ModelConfig::for_kind(kind).scaled(TINY_SCALE);
    Network::build(&cfg, vocab, seed).expect("valid tiny config")
}

/// Finite-difference check of the full network and loss for `kind`, in
/// training mode with dropout active under a fixed seed.
pub fn check_model(kind: ModelKind, seed: u64, max_per_entry: Option<usize>) -> GradCheckReport {
    let vocab = 7;
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let example = random_example(&mut rng, vocab);
    let mut net = build(kind, vocab, seed);
    let mut store = std::mem::take(&mut net.store);
    let opts = GradCheckOptions { max_per_entry, seed, ..Default::default() };
    finite_diff_gradcheck(
        &mut store,
        |s, with_grad| {
            std::mem::swap(&mut net.store, s);
            let r = run_objective(&mut net, kind, &example, seed, with_grad);
            std::mem::swap(&mut net.store, s);
            r
        },
        &opts,
    )
}

/// Output of a network on a perturbed copy of its trunk input, used to show
/// that frames beyond the receptive radius have no influence.
pub fn locality_probe(kind: ModelKind, frames: usize, target: usize, perturb_from: usize, seed: u64) -> (Array3<f32>, Array3<f32>) {
    let cfg = ModelConfig::for_kind(kind).scaled(0.25);
    let mut net = Network::<f32>::build(&cfg, 12, seed).expect("valid config");
    let mut rng = rng_from_seed(seed);
    let width = cfg.embed_width();
    let x = Array3::from_shape_simple_fn((width, 1, frames), || rng.random_range(-1.0f32..1.0));
    let mask = crate::nn::SeqMask::full(1, frames);
    // Fresh running statistics would shrink activations to nothing, so let
    // batch norm see the input a few times first.
    for i in 0..40 {
        let mut ctx = Ctx::train(i);
        net.forward_features(x.clone(), &mask, &mut ctx);
        net.store.commit_running_stats(&mut ctx);
    }
    let mut y = x.clone();
    for t in 0..frames {
        if t.abs_diff(target) >= perturb_from {
            for c in 0..width {
                y[[c, 0, t]] += rng.random_range(-3.0f32..3.0);
            }
        }
    }
    let (a, _, _) = net.forward_features(x, &mask, &mut Ctx::eval());
    let (b, _, _) = net.forward_features(y, &mask, &mut Ctx::eval());
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_network_gradients() {
        let r = check_model(ModelKind::Duration, 0, Some(4));
        assert!(r.checked > 50, "{r}");
        assert!(r.max_rel_error < 1e-3, "{r}");
    }

    #[test]
    fn locality_holds_for_duration_trunk() {
        let cfg = ModelConfig::duration().scaled(0.25);
        let radius = Network::<f32>::build(&cfg, 12, 0).unwrap().receptive_radius();
        let (a, b) = locality_probe(ModelKind::Duration, 2 * radius + 20, radius + 5, radius + 1, 0);
        let t = radius + 5;
        assert_eq!(a.slice(ndarray::s![.., 0, t]), b.slice(ndarray::s![.., 0, t]));
        // Perturbing inside the radius does move it.
        let (a, b) = locality_probe(ModelKind::Duration, 2 * radius + 20, t, radius / 2, 0);
        assert_ne!(a.slice(ndarray::s![.., 0, t]), b.slice(ndarray::s![.., 0, t]));
    }
}
