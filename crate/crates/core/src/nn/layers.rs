//! Separable convolution blocks and their pieces.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{BnUpdate, Ctx, ParamId, ParamStore, Real, SeqMask};
use crate::error::{Error, Result};

fn view2<F: Real>(store: &ParamStore<F>, id: ParamId) -> ArrayView2<'_, F> {
    store.value(id).view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
}

fn uniform_init<F: Real>(shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> Array2<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn(shape, || F::of(dist.sample(rng)))
}

fn check_channels<F: Real>(x: &Array3<F>, expected: usize, what: &str) -> Result<()> {
    if x.dim().0 != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expected} input channels, got {}",
            x.dim().0
        )));
    }
    Ok(())
}

/// Per-channel temporal convolution, stride 1, zero "same" padding, no bias.
#[derive(Debug, Clone)]
pub struct Depthwise {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl Depthwise {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, kernel: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let bound = (1.0 / (fan_in * kernel) as f64).sqrt();
        let w = uniform_init::<F>((channels, kernel), bound, rng);
        Self {
            weight: store.add_param(format!("{name}.weight"), w.into_dyn()),
            channels,
            kernel,
        }
    }

    /// Output range `t0..t1` whose inputs `t + off` fall inside a row of
    /// `len` frames, or `None` when the tap misses the row entirely.
    fn tap_range(off: isize, len: usize) -> Option<(usize, usize)> {
        let t0 = (-off).max(0);
        let t1 = (len as isize).min(len as isize - off);
        (t0 < t1).then_some((t0 as usize, t1 as usize))
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array3<F>) -> Array3<F> {
        let w = view2(store, self.weight);
        let (c, b, t) = x.dim();
        let mut y = Array3::<F>::zeros((c, b, t));
        if t == 0 {
            return y;
        }
        let pad = (self.kernel / 2) as isize;
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for (row, (yr, xr)) in ys.chunks_exact_mut(t).zip(xs.chunks_exact(t)).enumerate() {
            let ch = row / b;
            for k in 0..self.kernel {
                let off = k as isize - pad;
                let wk = w[[ch, k]];
                let Some((t0, t1)) = Self::tap_range(off, t) else { continue };
                let src = &xr[(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                for (o, &v) in yr[t0..t1].iter_mut().zip(src) {
                    *o += wk * v;
                }
            }
        }
        y
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, x: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
        let (c, b, t) = x.dim();
        let mut dx = Array3::<F>::zeros((c, b, t));
        let mut dw = Array2::<F>::zeros((c, self.kernel));
        if t > 0 {
            let w = view2(store, self.weight);
            let pad = (self.kernel / 2) as isize;
            let xs = x.as_slice().expect("standard layout");
            let dys = dy.as_slice().expect("standard layout");
            let dxs = dx.as_slice_mut().expect("standard layout");
            for (row, ((dxr, dyr), xr)) in dxs
                .chunks_exact_mut(t)
                .zip(dys.chunks_exact(t))
                .zip(xs.chunks_exact(t))
                .enumerate()
            {
                let ch = row / b;
                for k in 0..self.kernel {
                    let off = k as isize - pad;
                    let wk = w[[ch, k]];
                    let Some((t0, t1)) = Self::tap_range(off, t) else { continue };
                    let lo = (t0 as isize + off) as usize;
                    let hi = (t1 as isize + off) as usize;
                    let mut acc = F::zero();
                    for (g, &v) in dyr[t0..t1].iter().zip(&xr[lo..hi]) {
                        acc += *g * v;
                    }
                    dw[[ch, k]] += acc;
                    for (d, &g) in dxr[lo..hi].iter_mut().zip(&dyr[t0..t1]) {
                        *d += wk * g;
                    }
                }
            }
        }
        *store.grad_mut(self.weight) += &dw.into_dyn();
        dx
    }
}

/// 1x1 convolution: a channel-mixing matrix applied at every frame.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Pointwise {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, in_channels: usize, out_channels: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_channels as f64).sqrt();
        let w = uniform_init::<F>((out_channels, in_channels), bound, rng);
        let weight = store.add_param(format!("{name}.weight"), w.into_dyn());
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Array1::<F>::zeros(out_channels).into_dyn()));
        Self { weight, bias, in_channels, out_channels }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array3<F>) -> Array3<F> {
        let (cin, b, t) = x.dim();
        debug_assert_eq!(cin, self.in_channels);
        let x2 = x.view().into_shape_with_order((cin, b * t)).expect("standard layout");
        let mut y = view2(store, self.weight).dot(&x2);
        if let Some(bias) = self.bias {
            let bias = store.value(bias).view().into_dimensionality::<Ix1>().expect("rank-1 bias");
            y += &bias.insert_axis(Axis(1));
        }
        y.into_shape_with_order((self.out_channels, b, t)).expect("contiguous")
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, x: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
        let (cin, b, t) = x.dim();
        let x2 = x.view().into_shape_with_order((cin, b * t)).expect("standard layout");
        let dy2 = dy.view().into_shape_with_order((self.out_channels, b * t)).expect("standard layout");
        let dw = dy2.dot(&x2.t());
        let dx = view2(store, self.weight).t().dot(&dy2);
        *store.grad_mut(self.weight) += &dw.into_dyn();
        if let Some(bias) = self.bias {
            let db = dy2.sum_axis(Axis(1));
            *store.grad_mut(bias) += &db.into_dyn();
        }
        dx.into_shape_with_order((cin, b, t)).expect("contiguous")
    }
}

/// Batch normalization over the valid frames of every channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
    training: bool,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Array1::<F>::ones(channels).into_dyn()),
            beta: store.add_param(format!("{name}.beta"), Array1::<F>::zeros(channels).into_dyn()),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Array1::<F>::zeros(channels).into_dyn()),
            running_var: store.add_buffer(format!("{name}.running_var"), Array1::<F>::ones(channels).into_dyn()),
            channels,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    fn vec<'a, F: Real>(store: &'a ParamStore<F>, id: ParamId) -> ndarray::ArrayView1<'a, F> {
        store.value(id).view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    /// Eval-mode normalization in place, optionally followed by ReLU.
    /// Padded frames are set to zero.
    pub fn infer_in_place<F: Real>(&self, store: &ParamStore<F>, x: &mut Array3<F>, mask: &SeqMask, relu: bool) {
        let (c, b, t) = x.dim();
        let gamma = Self::vec(store, self.gamma);
        let beta = Self::vec(store, self.beta);
        let mean = Self::vec(store, self.running_mean);
        let var = Self::vec(store, self.running_var);
        let eps = F::of(self.eps);
        let xs = x.as_slice_mut().expect("standard layout");
        for (row, xr) in xs.chunks_exact_mut(t.max(1)).enumerate().take(c * b) {
            let (ch, bi) = (row / b, row % b);
            let (mu, inv, g, be) = (mean[ch], F::one() / (var[ch] + eps).sqrt(), gamma[ch], beta[ch]);
            let len = mask.len_of(bi);
            for v in &mut xr[..len] {
                let y = g * ((*v - mu) * inv) + be;
                *v = if relu && !(y > F::zero()) { F::zero() } else { y };
            }
            xr[len..].fill(F::zero());
        }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array3<F>, mask: &SeqMask, ctx: &mut Ctx<F>) -> (Array3<F>, BnCache<F>) {
        let (c, b, t) = x.dim();
        let gamma = Self::vec(store, self.gamma);
        let beta = Self::vec(store, self.beta);
        let eps = F::of(self.eps);
        let (mean, var) = if ctx.training {
            let n = mask.valid_count();
            let nf = F::of(n.max(1) as f64);
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            for ch in 0..c {
                let mut sum = F::zero();
                for bi in 0..b {
                    for &v in x.slice(s![ch, bi, ..mask.len_of(bi)]) {
                        sum += v;
                    }
                }
                let mu = sum / nf;
                let mut sq = F::zero();
                for bi in 0..b {
                    for &v in x.slice(s![ch, bi, ..mask.len_of(bi)]) {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / nf;
            }
            let unbiased = if n > 1 {
                var.mapv(|v| v * F::of(n as f64 / (n - 1) as f64))
            } else {
                var.clone()
            };
            ctx.push_bn_update(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean: mean.clone(),
                var: unbiased,
                momentum: self.momentum,
            });
            (mean, var)
        } else {
            (Self::vec(store, self.running_mean).to_owned(), Self::vec(store, self.running_var).to_owned())
        };
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = Array3::<F>::zeros((c, b, t));
        let mut y = Array3::<F>::zeros((c, b, t));
        for ch in 0..c {
            let (mu, inv, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for bi in 0..b {
                let len = mask.len_of(bi);
                let xs = x.slice(s![ch, bi, ..len]);
                let mut xh = xhat.slice_mut(s![ch, bi, ..len]);
                xh.zip_mut_with(&xs, |h, &v| *h = (v - mu) * inv);
                let mut ys = y.slice_mut(s![ch, bi, ..len]);
                ys.zip_mut_with(&xh, |o, &h| *o = g * h + be);
            }
        }
        (y, BnCache { xhat, inv_std, training: ctx.training })
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: &BnCache<F>, dy: &Array3<F>, mask: &SeqMask) -> Array3<F> {
        let (c, b, t) = dy.dim();
        let gamma = Self::vec(store, self.gamma).to_owned();
        let n = mask.valid_count();
        let nf = F::of(n.max(1) as f64);
        let mut dx = Array3::<F>::zeros((c, b, t));
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ch in 0..c {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for bi in 0..b {
                let len = mask.len_of(bi);
                for (&g, &h) in dy.slice(s![ch, bi, ..len]).iter().zip(cache.xhat.slice(s![ch, bi, ..len])) {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let scale = gamma[ch] * cache.inv_std[ch];
            for bi in 0..b {
                let len = mask.len_of(bi);
                let mut d = dx.slice_mut(s![ch, bi, ..len]);
                let g = dy.slice(s![ch, bi, ..len]);
                let h = cache.xhat.slice(s![ch, bi, ..len]);
                if cache.training {
                    // d/dx of gamma * (x - mean) / std with batch statistics.
                    let (m1, m2) = (sum_dy / nf, sum_dy_xhat / nf);
                    ndarray::Zip::from(&mut d).and(&g).and(&h).for_each(|d, &g, &h| {
                        *d = scale * (g - m1 - h * m2);
                    });
                } else {
                    d.zip_mut_with(&g, |d, &g| *d = scale * g);
                }
            }
        }
        *store.grad_mut(self.gamma) += &dgamma.into_dyn();
        *store.grad_mut(self.beta) += &dbeta.into_dyn();
        dx
    }
}

/// ReLU then dropout, with padded frames forced to zero.
///
/// Returns the output and the per-element multiplier the backward pass needs.
pub fn activate<F: Real>(z: Array3<F>, mask: &SeqMask, dropout: f64, ctx: &mut Ctx<F>) -> (Array3<F>, Array3<F>) {
    let (c, b, t) = z.dim();
    let drop = ctx.training && dropout > 0.0;
    let keep_scale = F::of(1.0 / (1.0 - dropout));
    let mut mult = Array3::<F>::zeros((c, b, t));
    let mut y = z;
    for ch in 0..c {
        for bi in 0..b {
            let len = mask.len_of(bi);
            for ti in 0..t {
                let v = y[[ch, bi, ti]];
                let on = ti < len && v > F::zero();
                if ti < len && ctx.tracking_kinks() {
                    ctx.note_kink(on);
                }
                let m = if !on {
                    F::zero()
                } else if drop {
                    if ctx.keep_prob(dropout) { keep_scale } else { F::zero() }
                } else {
                    F::one()
                };
                mult[[ch, bi, ti]] = m;
                y[[ch, bi, ti]] = v * m;
            }
        }
    }
    (y, mult)
}

/// Depthwise conv, pointwise conv, batch norm, ReLU, dropout.
#[derive(Debug, Clone)]
pub struct SubBlock {
    pub depthwise: Depthwise,
    pub pointwise: Pointwise,
    pub norm: BatchNorm,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct SubBlockCache<F> {
    x: Array3<F>,
    h: Array3<F>,
    bn: BnCache<F>,
    act: Option<Array3<F>>,
}

impl SubBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, kernel: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            depthwise: Depthwise::new(store, &format!("{name}.depthwise"), c_in, kernel, c_in, rng),
            pointwise: Pointwise::new(store, &format!("{name}.pointwise"), c_in, c_out, false, rng),
            norm: BatchNorm::new(store, &format!("{name}.norm"), c_out),
            dropout,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.channels
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.out_channels
    }

    /// With `activate = false` the batch-norm output is returned before ReLU
    /// and dropout, for blocks that add a residual first.
    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: Array3<F>, mask: &SeqMask, ctx: &mut Ctx<F>, activate_out: bool) -> (Array3<F>, SubBlockCache<F>) {
        let h = self.depthwise.forward(store, &x);
        let p = self.pointwise.forward(store, &h);
        let (z, bn) = self.norm.forward(store, &p, mask, ctx);
        let (y, act) = if activate_out {
            let (y, m) = activate(z, mask, self.dropout, ctx);
            (y, Some(m))
        } else {
            (z, None)
        };
        (y, SubBlockCache { x, h, bn, act })
    }

    /// Eval-mode forward that keeps no intermediates.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, x: &Array3<F>, mask: &SeqMask, activate_out: bool) -> Array3<F> {
        let mut p = self.pointwise.forward(store, &self.depthwise.forward(store, x));
        self.norm.infer_in_place(store, &mut p, mask, activate_out);
        p
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: SubBlockCache<F>, mut dy: Array3<F>, mask: &SeqMask) -> Array3<F> {
        if let Some(m) = &cache.act {
            dy *= m;
        }
        let dp = self.norm.backward(store, &cache.bn, &dy, mask);
        let dh = self.pointwise.backward(store, &cache.h, &dp);
        self.depthwise.backward(store, &cache.x, &dh)
    }

    pub fn check_input<F: Real>(&self, x: &Array3<F>) -> Result<()> {
        check_channels(x, self.in_channels(), "sub-block")
    }
}

/// Repeated sub-blocks with a pointwise + batch-norm residual added before
/// the last activation.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub sub_blocks: Vec<SubBlock>,
    pub residual: Pointwise,
    pub residual_norm: BatchNorm,
    pub dropout: f64,
}

pub struct ResidualCache<F> {
    subs: Vec<SubBlockCache<F>>,
    x: Array3<F>,
    res_bn: BnCache<F>,
    act: Array3<F>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, repeat: usize, c_in: usize, c_out: usize, kernel: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        assert!(repeat >= 1);
        let sub_blocks = (0..repeat)
            .map(|i| {
                let cin = if i == 0 { c_in } else { c_out };
                SubBlock::new(store, &format!("{name}.sub{i}"), cin, c_out, kernel, dropout, rng)
            })
            .collect();
        Self {
            sub_blocks,
            residual: Pointwise::new(store, &format!("{name}.residual"), c_in, c_out, false, rng),
            residual_norm: BatchNorm::new(store, &format!("{name}.residual_norm"), c_out),
            dropout,
        }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: Array3<F>, mask: &SeqMask, ctx: &mut Ctx<F>) -> (Array3<F>, ResidualCache<F>) {
        let last = self.sub_blocks.len() - 1;
        let mut subs = Vec::with_capacity(self.sub_blocks.len());
        let mut h = x.clone();
        for (i, sub) in self.sub_blocks.iter().enumerate() {
            let (out, cache) = sub.forward(store, h, mask, ctx, i != last);
            subs.push(cache);
            h = out;
        }
        let r = self.residual.forward(store, &x);
        let (r, res_bn) = self.residual_norm.forward(store, &r, mask, ctx);
        h += &r;
        let (y, act) = activate(h, mask, self.dropout, ctx);
        (y, ResidualCache { subs, x, res_bn, act })
    }

    pub fn infer<F: Real>(&self, store: &ParamStore<F>, x: &Array3<F>, mask: &SeqMask) -> Array3<F> {
        let last = self.sub_blocks.len() - 1;
        let mut h = self.sub_blocks[0].infer(store, x, mask, last != 0);
        for (i, sub) in self.sub_blocks.iter().enumerate().skip(1) {
            h = sub.infer(store, &h, mask, i != last);
        }
        let mut r = self.residual.forward(store, x);
        self.residual_norm.infer_in_place(store, &mut r, mask, false);
        ndarray::Zip::from(&mut h).and(&r).for_each(|h, &r| {
            let y = *h + r;
            *h = if y > F::zero() { y } else { F::zero() };
        });
        h
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: ResidualCache<F>, mut dy: Array3<F>, mask: &SeqMask) -> Array3<F> {
        dy *= &cache.act;
        let dr = self.residual_norm.backward(store, &cache.res_bn, &dy, mask);
        let mut dx = self.residual.backward(store, &cache.x, &dr);
        let mut g = dy;
        for (sub, c) in self.sub_blocks.iter().zip(cache.subs).rev() {
            g = sub.backward(store, c, g, mask);
        }
        dx += &g;
        dx
    }

    pub fn in_channels(&self) -> usize {
        self.sub_blocks[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.sub_blocks[0].out_channels()
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Plain(SubBlock),
    Residual(ResidualBlock),
}

pub enum StageCache<F> {
    Plain(SubBlockCache<F>),
    Residual(ResidualCache<F>),
}

impl Stage {
    pub fn kernel(&self) -> usize {
        match self {
            Stage::Plain(s) => s.depthwise.kernel,
            Stage::Residual(r) => r.sub_blocks[0].depthwise.kernel,
        }
    }

    /// Frames of context this stage adds on each side.
    pub fn radius(&self) -> usize {
        let per_sub = self.kernel() / 2;
        match self {
            Stage::Plain(_) => per_sub,
            Stage::Residual(r) => per_sub * r.sub_blocks.len(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Stage::Plain(s) => s.out_channels(),
            Stage::Residual(r) => r.out_channels(),
        }
    }
}

/// The convolutional body shared by all three networks.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub stages: Vec<Stage>,
}

pub struct TrunkCache<F> {
    stages: Vec<StageCache<F>>,
}

impl Trunk {
    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: Array3<F>, mask: &SeqMask, ctx: &mut Ctx<F>) -> (Array3<F>, TrunkCache<F>) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::Plain(s) => {
                    let (y, c) = s.forward(store, h, mask, ctx, true);
                    caches.push(StageCache::Plain(c));
                    y
                }
                Stage::Residual(r) => {
                    let (y, c) = r.forward(store, h, mask, ctx);
                    caches.push(StageCache::Residual(c));
                    y
                }
            };
        }
        (h, TrunkCache { stages: caches })
    }

    /// Eval-mode forward that keeps no intermediates; its cache cannot be
    /// used for a backward pass.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, x: Array3<F>, mask: &SeqMask) -> (Array3<F>, TrunkCache<F>) {
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::Plain(s) => s.infer(store, &h, mask, true),
                Stage::Residual(r) => r.infer(store, &h, mask),
            };
        }
        (h, TrunkCache { stages: Vec::new() })
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: TrunkCache<F>, dy: Array3<F>, mask: &SeqMask) -> Array3<F> {
        assert_eq!(cache.stages.len(), self.stages.len(), "backward needs a training-mode forward");
        let mut g = dy;
        for (stage, c) in self.stages.iter().zip(cache.stages).rev() {
            g = match (stage, c) {
                (Stage::Plain(s), StageCache::Plain(c)) => s.backward(store, c, g, mask),
                (Stage::Residual(r), StageCache::Residual(c)) => r.backward(store, c, g, mask),
                _ => unreachable!("cache does not match stage"),
            };
        }
        g
    }

    /// Total one-sided receptive radius in frames.
    pub fn radius(&self) -> usize {
        self.stages.iter().map(Stage::radius).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, Stage::out_channels)
    }
}

/// Lookup table from token ids to embedding vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let table = Array2::from_shape_simple_fn((vocab, dim), || F::of(normal.sample(rng)));
        Self {
            table: store.add_param(format!("{name}.table"), table.into_dyn()),
            vocab,
            dim,
        }
    }

    /// `ids` is `[batch, max_len]`; output is `[dim, batch, max_len]`, zero where padded.
    pub fn forward<F: Real>(&self, store: &ParamStore<F>, ids: &Array2<u32>, mask: &SeqMask) -> Result<Array3<F>> {
        let table = view2(store, self.table);
        let (b, n) = ids.dim();
        let mut out = Array3::<F>::zeros((self.dim, b, n));
        for bi in 0..b {
            for ti in 0..mask.len_of(bi) {
                let id = ids[[bi, ti]] as usize;
                if id >= self.vocab {
                    return Err(Error::ShapeMismatch(format!("token id {id} outside embedding of {}", self.vocab)));
                }
                out.slice_mut(s![.., bi, ti]).assign(&table.row(id));
            }
        }
        Ok(out)
    }

    pub fn backward<F: Real>(&self, store: &mut ParamStore<F>, ids: &Array2<u32>, mask: &SeqMask, dy: &Array3<F>) {
        let grad = store.grad_mut(self.table);
        for bi in 0..ids.nrows() {
            for ti in 0..mask.len_of(bi) {
                let id = ids[[bi, ti]] as usize;
                let mut row = grad.slice_mut(s![id, ..]);
                row += &dy.slice(s![.., bi, ti]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from_seed;

    fn neutral_subblock(c: usize) -> (ParamStore<f64>, SubBlock) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let sub = SubBlock::new(&mut store, "s", c, c, 3, 0.0, &mut rng);
        let mut dw = Array2::<f64>::zeros((c, 3));
        dw.column_mut(1).fill(1.0);
        *store.value_mut(sub.depthwise.weight) = dw.into_dyn();
        *store.value_mut(sub.pointwise.weight) = Array2::<f64>::eye(c).into_dyn();
        (store, sub)
    }

    #[test]
    fn identity_subblock_is_relu_in_eval() {
        let (store, sub) = neutral_subblock(3);
        let x = Array3::from_shape_fn((3, 2, 5), |(c, b, t)| (c as f64 - 1.0) * (t as f64 - 2.0) + b as f64 * 0.5);
        let mask = SeqMask::full(2, 5);
        let mut ctx = Ctx::eval();
        let (y, _) = sub.forward(&store, x.clone(), &mask, &mut ctx, true);
        // Running stats start at mean 0 / var 1, so eval batch norm divides by sqrt(1 + eps).
        let scale = 1.0 / (1.0 + BatchNorm::EPS).sqrt();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b.max(0.0) * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f32>::new();
        let sub = SubBlock::new(&mut store, "s", 4, 6, 5, 0.1, &mut rng_from_seed(3));
        let x = Array3::<f32>::zeros((4, 2, 7));
        let (y, _) = sub.forward(&store, x, &SeqMask::new(vec![7, 4]), &mut Ctx::eval(), true);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_branch_residual_is_relu() {
        let c = 3;
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 2, c, c, 3, 0.0, &mut rng_from_seed(9));
        for sub in &block.sub_blocks {
            store.value_mut(sub.depthwise.weight).fill(0.0);
            store.value_mut(sub.pointwise.weight).fill(0.0);
        }
        *store.value_mut(block.residual.weight) = Array2::<f64>::eye(c).into_dyn();
        *store.value_mut(block.residual_norm.running_var) = Array1::from_elem(c, 1.0 - BatchNorm::EPS).into_dyn();
        let x = Array3::from_shape_fn((c, 1, 6), |(ci, _, t)| (ci as f64 + 1.0) * (t as f64 - 2.5));
        let (y, _) = block.forward(&store, x.clone(), &SeqMask::full(1, 6), &mut Ctx::eval());
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn padded_frames_stay_zero() {
        let mut store = ParamStore::<f32>::new();
        let block = ResidualBlock::new(&mut store, "b", 3, 2, 4, 5, 0.0, &mut rng_from_seed(5));
        let mask = SeqMask::new(vec![6, 3]);
        let mut x = Array3::from_shape_fn((2, 2, 6), |(c, b, t)| (c + b + t) as f32 * 0.3 - 0.7);
        mask.apply(&mut x);
        let (y, _) = block.forward(&store, x, &mask, &mut Ctx::train(0));
        assert!(y.slice(s![.., 1, 3..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_is_seeded() {
        let mut store = ParamStore::<f32>::new();
        let sub = SubBlock::new(&mut store, "s", 3, 3, 3, 0.5, &mut rng_from_seed(2));
        let x = Array3::from_shape_fn((3, 2, 9), |(c, b, t)| ((c * 7 + b * 3 + t) as f32).sin());
        let mask = SeqMask::full(2, 9);
        let (a, _) = sub.forward(&store, x.clone(), &mask, &mut Ctx::train(11), true);
        let (b, _) = sub.forward(&store, x.clone(), &mask, &mut Ctx::train(11), true);
        let (c, _) = sub.forward(&store, x, &mask, &mut Ctx::train(12), true);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
