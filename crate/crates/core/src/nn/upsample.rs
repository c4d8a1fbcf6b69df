//! Gaussian upsampling of token embeddings to frame rate.

use ndarray::{s, Array2, Array3, ArrayView2};

use super::{Real, SeqMask};
use crate::error::{Error, Result};

/// Frame-by-token mixing weights, `[T, N]` with `T = Σ durs`.
///
/// Token `i` is a Gaussian centred at `Σ_{j<i} d_j + d_i / 2` with standard
/// deviation `max(d_i, 1) / 2`, evaluated at frame centres `t + 0.5`. Each row
/// is normalised over the tokens with non-zero duration.
pub fn gaussian_weights(durs: &[u32]) -> Result<Array2<f64>> {
    let total: u64 = durs.iter().map(|&d| d as u64).sum();
    if total == 0 {
        return Err(Error::EmptyExpansion);
    }
    let t_len = total as usize;
    let n = durs.len();
    let mut centers = Vec::with_capacity(n);
    let mut start = 0.0;
    for &d in durs {
        centers.push(start + d as f64 / 2.0);
        start += d as f64;
    }
    let mut w = Array2::<f64>::zeros((t_len, n));
    let mut logits = vec![f64::NEG_INFINITY; n];
    for t in 0..t_len {
        let pos = t as f64 + 0.5;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if durs[i] == 0 {
                logits[i] = f64::NEG_INFINITY;
                continue;
            }
            let sigma = (durs[i].max(1) as f64) / 2.0;
            let z = (pos - centers[i]) / sigma;
            logits[i] = -0.5 * z * z;
            best = best.max(logits[i]);
        }
        let mut row = w.row_mut(t);
        let mut sum = 0.0;
        for i in 0..n {
            if durs[i] > 0 {
                let e = (logits[i] - best).exp();
                row[i] = e;
                sum += e;
            }
        }
        row /= sum;
    }
    Ok(w)
}

/// Single-sequence upsampling: `[E, N]` embeddings to `[E, T]` frames.
pub fn gaussian_upsample<F: Real>(embeddings: ArrayView2<'_, F>, durs: &[u32]) -> Result<Array2<F>> {
    if embeddings.ncols() != durs.len() {
        return Err(Error::LengthMismatch { expected: embeddings.ncols(), actual: durs.len() });
    }
    let w = gaussian_weights(durs)?.mapv(F::of);
    Ok(embeddings.dot(&w.t()))
}

/// Batched upsampling with cached weights for the backward pass.
#[derive(Debug, Clone)]
pub struct GaussianUpsample<F> {
    weights: Vec<Array2<F>>,
    token_mask: SeqMask,
    frame_mask: SeqMask,
}

impl<F: Real> GaussianUpsample<F> {
    /// `durations[b]` must have one entry per valid token of sequence `b`.
    pub fn new(durations: &[Vec<u32>], token_mask: &SeqMask) -> Result<Self> {
        if durations.len() != token_mask.batch() {
            return Err(Error::LengthMismatch { expected: token_mask.batch(), actual: durations.len() });
        }
        let mut weights = Vec::with_capacity(durations.len());
        let mut frames = Vec::with_capacity(durations.len());
        for (b, d) in durations.iter().enumerate() {
            if d.len() != token_mask.len_of(b) {
                return Err(Error::LengthMismatch { expected: token_mask.len_of(b), actual: d.len() });
            }
            let w = gaussian_weights(d)?;
            frames.push(w.nrows());
            weights.push(w.mapv(F::of));
        }
        Ok(Self { weights, token_mask: token_mask.clone(), frame_mask: SeqMask::new(frames) })
    }

    pub fn frame_mask(&self) -> &SeqMask {
        &self.frame_mask
    }

    /// `[E, B, N]` to `[E, B, T]`.
    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let e = x.dim().0;
        let b = self.weights.len();
        let mut out = Array3::<F>::zeros((e, b, self.frame_mask.max_len()));
        for (bi, w) in self.weights.iter().enumerate() {
            let n = self.token_mask.len_of(bi);
            let t = self.frame_mask.len_of(bi);
            let emb = x.slice(s![.., bi, ..n]);
            out.slice_mut(s![.., bi, ..t]).assign(&emb.dot(&w.t()));
        }
        out
    }

    /// Gradient with respect to the token embeddings. Durations are not
    /// differentiated.
    pub fn backward(&self, dy: &Array3<F>) -> Array3<F> {
        let e = dy.dim().0;
        let b = self.weights.len();
        let mut dx = Array3::<F>::zeros((e, b, self.token_mask.max_len()));
        for (bi, w) in self.weights.iter().enumerate() {
            let n = self.token_mask.len_of(bi);
            let t = self.frame_mask.len_of(bi);
            let g = dy.slice(s![.., bi, ..t]);
            dx.slice_mut(s![.., bi, ..n]).assign(&g.dot(w));
        }
        dx
    }
}
