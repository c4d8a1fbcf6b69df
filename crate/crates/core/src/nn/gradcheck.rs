//! Central finite-difference checks of the hand-written backward passes.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix3};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::layers::{activate, BatchNorm, Depthwise, Embedding, Pointwise, ResidualBlock, SubBlock};
use super::upsample::GaussianUpsample;
use super::{rng_from_seed, Ctx, ParamId, ParamStore, SeqMask};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Upper bound on coordinates probed per entry; `None` probes all of them.
    pub max_per_entry: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, max_per_entry: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU and were therefore skipped.
    pub skipped: usize,
    pub worst: Option<String>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "max_rel_error={:.3e} checked={} skipped={}", self.max_rel_error, self.checked, self.skipped)?;
        if let Some(w) = &self.worst {
            write!(f, " worst={w}")?;
        }
        Ok(())
    }
}

/// Compares analytic gradients against central differences.
///
/// `objective(store, with_grad)` returns the scalar loss and, when the
/// context tracked them, a fingerprint of the ReLU on/off pattern. With
/// `with_grad` it must also accumulate gradients into the (pre-zeroed) store.
/// Probes whose perturbation changes the fingerprint straddle a kink and are
/// skipped. The error for one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_gradcheck(
    store: &mut ParamStore<f64>,
    mut objective: impl FnMut(&mut ParamStore<f64>, bool) -> (f64, Option<u64>),
    opts: &GradCheckOptions,
) -> GradCheckReport {
    store.zero_grad();
    let (_, base_kinks) = objective(store, true);
    let analytic: Vec<Option<ArrayD<f64>>> = store.entries().iter().map(|e| e.grad.clone()).collect();
    let mut rng = rng_from_seed(opts.seed);
    let mut report = GradCheckReport::default();
    for (idx, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_per_entry {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.entries()[idx].value.as_slice().expect("contiguous")[c];
            let mut probe = |store: &mut ParamStore<f64>, v: f64| {
                store.entries_mut()[idx].value.as_slice_mut().expect("contiguous")[c] = v;
                objective(store, false)
            };
            let (plus, k_plus) = probe(store, orig + opts.h);
            let (minus, k_minus) = probe(store, orig - opts.h);
            store.entries_mut()[idx].value.as_slice_mut().expect("contiguous")[c] = orig;
            if k_plus != base_kinks || k_minus != base_kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.as_slice().expect("contiguous")[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{}[{c}] analytic={a:.6e} numeric={numeric:.6e}", store.entries()[idx].name));
            }
        }
    }
    store.zero_grad();
    report
}

/// Layers covered by [`check_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Depthwise,
    Pointwise,
    BatchNormEval,
    BatchNormTrain,
    Activation,
    SubBlockEval,
    SubBlockTrain,
    Residual,
    Embedding,
    Upsample,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Depthwise,
        LayerKind::Pointwise,
        LayerKind::BatchNormEval,
        LayerKind::BatchNormTrain,
        LayerKind::Activation,
        LayerKind::SubBlockEval,
        LayerKind::SubBlockTrain,
        LayerKind::Residual,
        LayerKind::Embedding,
        LayerKind::Upsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Depthwise => "depthwise",
            LayerKind::Pointwise => "pointwise",
            LayerKind::BatchNormEval => "batchnorm_eval",
            LayerKind::BatchNormTrain => "batchnorm_train",
            LayerKind::Activation => "relu",
            LayerKind::SubBlockEval => "subblock_eval",
            LayerKind::SubBlockTrain => "subblock_train",
            LayerKind::Residual => "residual_block",
            LayerKind::Embedding => "embedding",
            LayerKind::Upsample => "gaussian_upsample",
        }
    }
}

fn normal3(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn input3(store: &ParamStore<f64>, id: ParamId) -> Array3<f64> {
    store.value(id).clone().into_dimensionality::<Ix3>().expect("rank-3 input")
}

/// Weighted sum of the output, so every output element has an O(1) gradient.
fn probe_loss(y: &Array3<f64>, r: &Array3<f64>) -> f64 {
    (y * r).sum()
}

fn add_input_grad(store: &mut ParamStore<f64>, id: ParamId, dx: Array3<f64>) {
    *store.grad_mut(id) += &dx.into_dyn();
}

/// Builds a small random instance of `kind` and checks it in f64.
pub fn check_layer(kind: LayerKind, seed: u64) -> GradCheckReport {
    check_layer_with(kind, seed, false)
}

/// Same as [`check_layer`] with the backward pass deliberately doubled, as a
/// negative control for the checker itself.
pub fn check_layer_corrupted(kind: LayerKind, seed: u64) -> GradCheckReport {
    check_layer_with(kind, seed, true)
}

fn check_layer_with(kind: LayerKind, seed: u64, corrupt: bool) -> GradCheckReport {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::<f64>::new();
    let opts = GradCheckOptions { seed, ..Default::default() };
    let scale = if corrupt { 2.0 } else { 1.0 };
    let (b, t) = (2, 5);
    let mask = SeqMask::new(vec![t, t - 1]);
    let masked_input = |store: &mut ParamStore<f64>, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut x = normal3((c, b, t), rng);
        mask.apply(&mut x);
        store.add_param("input", x.into_dyn())
    };
    match kind {
        LayerKind::Depthwise => {
            let layer = Depthwise::new(&mut store, "dw", 3, 3, 1, &mut rng);
            let x = masked_input(&mut store, 3, &mut rng);
            let r = normal3((3, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let y = layer.forward(s, &xin);
                    if grad {
                        let dx = layer.backward(s, &xin, &(&r * scale));
                        add_input_grad(s, x, dx);
                    }
                    (probe_loss(&y, &r), None)
                },
                &opts,
            )
        }
        LayerKind::Pointwise => {
            let layer = Pointwise::new(&mut store, "pw", 3, 4, true, &mut rng);
            let x = masked_input(&mut store, 3, &mut rng);
            let r = normal3((4, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let y = layer.forward(s, &xin);
                    if grad {
                        let dx = layer.backward(s, &xin, &(&r * scale));
                        add_input_grad(s, x, dx);
                    }
                    (probe_loss(&y, &r), None)
                },
                &opts,
            )
        }
        LayerKind::BatchNormEval | LayerKind::BatchNormTrain => {
            let training = kind == LayerKind::BatchNormTrain;
            let layer = BatchNorm::new(&mut store, "bn", 3);
            let mut uniform = |lo: f64, hi: f64| Array1::from_shape_simple_fn(3, || rng.random_range(lo..hi)).into_dyn();
            *store.value_mut(layer.running_mean) = uniform(-0.5, 0.5);
            *store.value_mut(layer.running_var) = uniform(0.5, 2.0);
            *store.value_mut(layer.gamma) = uniform(0.5, 1.5);
            *store.value_mut(layer.beta) = uniform(-0.5, 0.5);
            let x = masked_input(&mut store, 3, &mut rng);
            let r = normal3((3, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let mut ctx = Ctx::new(training, seed);
                    let (y, cache) = layer.forward(s, &xin, &mask, &mut ctx);
                    if grad {
                        let dx = layer.backward(s, &cache, &(&r * scale), &mask);
                        add_input_grad(s, x, dx);
                    }
                    (probe_loss(&y, &r), None)
                },
                &opts,
            )
        }
        LayerKind::Activation => {
            let x = masked_input(&mut store, 3, &mut rng);
            let r = normal3((3, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let mut ctx = Ctx::eval().track_kinks();
                    let (y, mult) = activate(xin, &mask, 0.0, &mut ctx);
                    if grad {
                        add_input_grad(s, x, &r * &mult * scale);
                    }
                    (probe_loss(&y, &r), ctx.kink_hash())
                },
                &opts,
            )
        }
        LayerKind::SubBlockEval | LayerKind::SubBlockTrain => {
            let training = kind == LayerKind::SubBlockTrain;
            let layer = SubBlock::new(&mut store, "sub", 2, 3, 3, 0.0, &mut rng);
            let x = masked_input(&mut store, 2, &mut rng);
            let r = normal3((3, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let mut ctx = Ctx::new(training, seed).track_kinks();
                    let (y, cache) = layer.forward(s, xin, &mask, &mut ctx, true);
                    if grad {
                        let dx = layer.backward(s, cache, &r * scale, &mask);
                        add_input_grad(s, x, dx);
                    }
                    (probe_loss(&y, &r), ctx.kink_hash())
                },
                &opts,
            )
        }
        LayerKind::Residual => {
            let layer = ResidualBlock::new(&mut store, "res", 2, 3, 3, 3, 0.0, &mut rng);
            let mask = SeqMask::new(vec![4, 3]);
            let mut xv = normal3((3, b, 4), &mut rng);
            mask.apply(&mut xv);
            let x = store.add_param("input", xv.into_dyn());
            let r = normal3((3, b, 4), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let mut ctx = Ctx::eval().track_kinks();
                    let (y, cache) = layer.forward(s, xin, &mask, &mut ctx);
                    if grad {
                        let dx = layer.backward(s, cache, &r * scale, &mask);
                        add_input_grad(s, x, dx);
                    }
                    (probe_loss(&y, &r), ctx.kink_hash())
                },
                &opts,
            )
        }
        LayerKind::Embedding => {
            let layer = Embedding::new(&mut store, "emb", 6, 4, &mut rng);
            let ids = Array2::from_shape_simple_fn((b, t), || rng.random_range(0..6u32));
            let r = normal3((4, b, t), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let y = layer.forward(s, &ids, &mask).expect("ids in range");
                    if grad {
                        layer.backward(s, &ids, &mask, &(&r * scale));
                    }
                    (probe_loss(&y, &r), None)
                },
                &opts,
            )
        }
        LayerKind::Upsample => {
            let durs = vec![vec![2, 0, 3, 1, 1], vec![1, 4, 2, 0]];
            let up = GaussianUpsample::<f64>::new(&durs, &mask).expect("valid durations");
            let x = masked_input(&mut store, 3, &mut rng);
            let r = normal3((3, b, up.frame_mask().max_len()), &mut rng);
            finite_diff_gradcheck(
                &mut store,
                |s, grad| {
                    let xin = input3(s, x);
                    let y = up.forward(&xin);
                    if grad {
                        add_input_grad(s, x, up.backward(&(&r * scale)));
                    }
                    (probe_loss(&y, &r), None)
                },
                &opts,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for kind in LayerKind::ALL {
            for seed in 0..3 {
                let report = check_layer(kind, seed);
                assert!(report.checked > 0, "{} checked nothing", kind.name());
                assert!(report.max_rel_error < 1e-4, "{} seed {seed}: {report}", kind.name());
            }
        }
    }

    #[test]
    fn linear_layer_is_nearly_exact() {
        assert!(check_layer(LayerKind::Pointwise, 7).max_rel_error < 1e-6);
    }

    #[test]
    fn doubled_backward_is_caught() {
        // |2n - n| / max(|2n|, |n|) is exactly one half for every coordinate.
        let report = check_layer_corrupted(LayerKind::SubBlockEval, 1);
        assert!((report.max_rel_error - 0.5).abs() < 1e-3, "{report}");
    }

    #[test]
    fn sampling_limits_probes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", ndarray::Array1::from_elem(50, 0.5).into_dyn());
        let opts = GradCheckOptions { max_per_entry: Some(7), ..Default::default() };
        let report = finite_diff_gradcheck(
            &mut store,
            |s, grad| {
                let w = s.value(id).clone();
                if grad {
                    *s.grad_mut(id) += &w.mapv(|v| 2.0 * v);
                }
                (w.mapv(|v| v * v).sum(), None)
            },
            &opts,
        );
        assert_eq!(report.checked, 7);
        assert!(report.max_rel_error < 1e-8);
    }
}
