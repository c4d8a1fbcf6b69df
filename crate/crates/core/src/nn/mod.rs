//! Differentiable kernels for the three networks.
//!
//! There is no general autodiff graph. Every layer is an immutable description
//! holding [`ParamId`]s into a [`ParamStore`]; `forward` borrows the store and
//! returns the activations together with whatever the matching `backward`
//! needs, and `backward` accumulates parameter gradients into the store.
//! Activations are `[channels, batch, time]` arrays with right padding marked
//! by a [`SeqMask`]; padded frames are kept at zero after every layer.
//!
//! Everything is generic over [`Real`] so the same code runs in f32 for
//! training and in f64 for finite-difference gradient checks.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod schedule;
pub mod upsample;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array3, ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use layers::{
    BatchNorm, Depthwise, Embedding, Pointwise, ResidualBlock, Stage, SubBlock, Trunk,
};
pub use optim::{adam_step, clip_grad_norm, Adam, AdamConfig, OptimizerState};
pub use schedule::{cosine_warmup_lr, CosineWarmup};
pub use upsample::{gaussian_upsample, gaussian_weights, GaussianUpsample};

/// Floating-point element type of every tensor in the networks.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Valid lengths of a right-padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMask {
    lens: Vec<usize>,
    max_len: usize,
}

impl SeqMask {
    pub fn new(lens: Vec<usize>) -> Self {
        let max_len = lens.iter().copied().max().unwrap_or(0);
        Self { lens, max_len }
    }

    /// A batch of `batch` sequences, all of length `len`.
    pub fn full(batch: usize, len: usize) -> Self {
        Self { lens: vec![len; batch], max_len: len }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.lens[b]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn valid_count(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }

    /// Zeroes every padded frame of a `[C, B, T]` activation.
    pub fn apply<F: Real>(&self, x: &mut Array3<F>) {
        if self.lens.iter().all(|&l| l == self.max_len) {
            return;
        }
        for mut plane in x.outer_iter_mut() {
            for (b, mut row) in plane.outer_iter_mut().enumerate() {
                row.slice_mut(ndarray::s![self.lens[b]..]).fill(F::zero());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// One named tensor in a [`ParamStore`]. Buffers (batch-norm running
/// statistics) have no gradient and are not trained.
#[derive(Debug, Clone)]
pub struct Entry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: Option<ArrayD<F>>,
}

impl<F: Real> Entry<F> {
    pub fn trainable(&self) -> bool {
        self.grad.is_some()
    }
}

/// Flat, ordered storage for every parameter and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let grad = Some(ArrayD::zeros(value.raw_dim()));
        self.push(name.into(), value, grad)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.push(name.into(), value, None)
    }

    fn push(&mut self, name: String, value: ArrayD<F>, grad: Option<ArrayD<F>>) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        self.entries[id.0]
            .grad
            .as_mut()
            .expect("gradient requested for a buffer")
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<&Entry<F>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn zero_grad(&mut self) {
        for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
            g.fill(F::zero());
        }
    }

    /// Number of trainable scalars; buffers are excluded.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Same entries converted to another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.mapv(|v| G::of(v.as_f64())),
                    grad: e.grad.as_ref().map(|g| g.mapv(|v| G::of(v.as_f64()))),
                })
                .collect(),
        }
    }

    /// Folds the batch statistics gathered by a training forward pass into
    /// the running averages.
    pub fn commit_running_stats(&mut self, ctx: &mut Ctx<F>) {
        for u in ctx.take_bn_updates() {
            let m = F::of(u.momentum);
            let keep = F::one() - m;
            let rm = self.value_mut(u.running_mean);
            rm.zip_mut_with(&u.mean.into_dyn(), |r, &b| *r = *r * keep + b * m);
            let rv = self.value_mut(u.running_var);
            rv.zip_mut_with(&u.var.into_dyn(), |r, &b| *r = *r * keep + b * m);
        }
    }
}

/// Running-statistics update recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate<F> {
    running_mean: ParamId,
    running_var: ParamId,
    mean: Array1<F>,
    var: Array1<F>,
    momentum: f64,
}

/// Per-call forward state: mode, dropout randomness, and side outputs.
pub struct Ctx<F> {
    pub training: bool,
    rng: ChaCha8Rng,
    kink_hash: Option<u64>,
    bn_updates: Vec<BnUpdate<F>>,
}

impl<F: Real> Ctx<F> {
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn train(seed: u64) -> Self {
        Self::new(true, seed)
    }

    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            kink_hash: None,
            bn_updates: Vec::new(),
        }
    }

    /// Records a fingerprint of every ReLU on/off decision made from now on.
    pub fn track_kinks(mut self) -> Self {
        self.kink_hash = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn kink_hash(&self) -> Option<u64> {
        self.kink_hash
    }

    pub(crate) fn note_kink(&mut self, on: bool) {
        if let Some(h) = self.kink_hash.as_mut() {
            *h = (*h ^ on as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn tracking_kinks(&self) -> bool {
        self.kink_hash.is_some()
    }

    pub(crate) fn keep_prob(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() >= p
    }

    pub(crate) fn push_bn_update(&mut self, u: BnUpdate<F>) {
        self.bn_updates.push(u);
    }

    /// Running-statistics updates gathered during a training forward pass.
    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate<F>> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
