//! Training objectives and the duration decode rule.
//!
//! The `*_objective` functions take a network output batch and return the
//! loss together with its gradient with respect to that output. The plain
//! `*_loss` functions evaluate the same quantities for a single sequence.

use ndarray::{s, Array3};

use super::ModelConfig;
use crate::audio::{MelSpec, PitchStats, PitchTrack};
use crate::error::{Error, Result};
use crate::nn::{Real, SeqMask};
use crate::text::{DurationSeq, TokenSeq, BLANK_ID};

/// Regression target for a duration of `d` frames.
pub fn log_duration(d: u32) -> f64 {
    (d as f64).ln_1p()
}

/// Mean of `(ŷ - ln(1 + d))²` over positions where `mask` is true.
pub fn duration_loss(pred: &[f64], durs: &[u32], mask: &[bool]) -> Result<f64> {
    if pred.len() != durs.len() {
        return Err(Error::LengthMismatch { expected: durs.len(), actual: pred.len() });
    }
    if mask.len() != durs.len() {
        return Err(Error::LengthMismatch { expected: durs.len(), actual: mask.len() });
    }
    let (sum, n) = pred
        .iter()
        .zip(durs)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((&p, &d), _)| (s + (p - log_duration(d)).powi(2), n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Decodes log-durations: `max(round(exp(ŷ) - 1), floor)` with floor 1 for
/// graphemes and 0 for blanks.
pub fn decode_durations(pred: &[f64], tokens: &TokenSeq) -> Result<DurationSeq> {
    if pred.len() != tokens.len() {
        return Err(Error::LengthMismatch { expected: tokens.len(), actual: pred.len() });
    }
    let durs = pred
        .iter()
        .zip(&tokens.ids)
        .map(|(&y, &id)| {
            let floor = if id == BLANK_ID { 0.0 } else { 1.0 };
            if y.is_nan() {
                return floor as u32;
            }
            // Bounded so a wild prediction cannot overflow the frame count.
            (y.min(20.0).exp() - 1.0).round().max(floor) as u32
        })
        .collect();
    Ok(DurationSeq(durs))
}

/// Class index of a duration for the classification head.
pub fn duration_class(d: u32) -> usize {
    (d as usize).min(ModelConfig::DURATION_CLASSES - 1)
}

/// Decodes class logits `[classes, N]` by argmax with the same floors as
/// [`decode_durations`].
pub fn decode_duration_classes(logits: ndarray::ArrayView2<'_, f64>, tokens: &TokenSeq) -> Result<DurationSeq> {
    if logits.ncols() != tokens.len() {
        return Err(Error::LengthMismatch { expected: tokens.len(), actual: logits.ncols() });
    }
    let durs = logits
        .columns()
        .into_iter()
        .zip(&tokens.ids)
        .map(|(col, &id)| {
            let best = col.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0 as u32;
            if id == BLANK_ID { best } else { best.max(1) }
        })
        .collect();
    Ok(DurationSeq(durs))
}

fn check_targets(mask: &SeqMask, lens: impl Iterator<Item = usize>) -> Result<()> {
    let lens: Vec<usize> = lens.collect();
    if lens.len() != mask.batch() {
        return Err(Error::LengthMismatch { expected: mask.batch(), actual: lens.len() });
    }
    for (&len, &expected) in lens.iter().zip(mask.lens()) {
        if len != expected {
            return Err(Error::LengthMismatch { expected, actual: len });
        }
    }
    Ok(())
}

/// Duration regression over a batch; `out` is `[1, B, N]`.
pub fn duration_objective<F: Real>(out: &Array3<F>, durs: &[&[u32]], mask: &SeqMask) -> Result<(f64, Array3<F>)> {
    check_targets(mask, durs.iter().map(|d| d.len()))?;
    let n = mask.valid_count().max(1) as f64;
    let mut grad = Array3::<F>::zeros(out.raw_dim());
    let mut sum = 0.0;
    for (b, d) in durs.iter().enumerate() {
        for (i, &di) in d.iter().enumerate() {
            let diff = out[[0, b, i]].as_f64() - log_duration(di);
            sum += diff * diff;
            grad[[0, b, i]] = F::of(2.0 * diff / n);
        }
    }
    Ok((sum / n, grad))
}

/// Softmax cross-entropy over duration classes; `out` is `[classes, B, N]`.
pub fn duration_class_objective<F: Real>(out: &Array3<F>, durs: &[&[u32]], mask: &SeqMask) -> Result<(f64, Array3<F>)> {
    check_targets(mask, durs.iter().map(|d| d.len()))?;
    let n = mask.valid_count().max(1) as f64;
    let mut grad = Array3::<F>::zeros(out.raw_dim());
    let mut sum = 0.0;
    for (b, d) in durs.iter().enumerate() {
        for (i, &di) in d.iter().enumerate() {
            let logits = out.slice(s![.., b, i]);
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let target = duration_class(di);
            sum += z.ln() + max - logits[target].as_f64();
            for (c, e) in exps.iter().enumerate() {
                let p = e / z - if c == target { 1.0 } else { 0.0 };
                grad[[c, b, i]] = F::of(p / n);
            }
        }
    }
    Ok((sum / n, grad))
}

/// `-[y ln σ(z) + (1 - y) ln(1 - σ(z))]`, computed without overflow.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// BCE of the unvoiced logit plus MSE of the normalised pitch on voiced
/// frames, for one sequence. `p_nv` is a logit for "unvoiced".
pub fn pitch_loss(p_nv: &[f64], p_body: &[f64], f0: &PitchTrack, stats: &PitchStats) -> Result<f64> {
    for len in [p_nv.len(), p_body.len()] {
        if len != f0.len() {
            return Err(Error::LengthMismatch { expected: f0.len(), actual: len });
        }
    }
    if f0.is_empty() {
        return Ok(0.0);
    }
    let mut bce = 0.0;
    let mut mse = 0.0;
    let mut voiced = 0usize;
    for ((&z, &p), &f) in p_nv.iter().zip(p_body).zip(&f0.f0) {
        let unvoiced = f <= 0.0;
        bce += bce_with_logit(z, if unvoiced { 1.0 } else { 0.0 });
        if !unvoiced {
            mse += (p - (f as f64 - stats.mu_f0) / stats.sigma_f0).powi(2);
            voiced += 1;
        }
    }
    let mse = if voiced == 0 { 0.0 } else { mse / voiced as f64 };
    Ok(bce / f0.len() as f64 + mse)
}

/// Batched [`pitch_loss`]; `out` is `[2, B, T]` with the unvoiced logit in
/// channel 0 and the normalised pitch in channel 1. Both terms are averaged
/// over the whole batch.
pub fn pitch_objective<F: Real>(out: &Array3<F>, f0: &[&[f32]], stats: &PitchStats, mask: &SeqMask) -> Result<(f64, Array3<F>)> {
    check_targets(mask, f0.iter().map(|f| f.len()))?;
    let frames = mask.valid_count().max(1) as f64;
    let voiced = f0.iter().flat_map(|f| f.iter()).filter(|&&v| v > 0.0).count();
    let mut grad = Array3::<F>::zeros(out.raw_dim());
    let (mut bce, mut mse) = (0.0, 0.0);
    for (b, track) in f0.iter().enumerate() {
        for (t, &f) in track.iter().enumerate() {
            let z = out[[0, b, t]].as_f64();
            let y = if f > 0.0 { 0.0 } else { 1.0 };
            bce += bce_with_logit(z, y);
            grad[[0, b, t]] = F::of((sigmoid(z) - y) / frames);
            if f > 0.0 {
                let diff = out[[1, b, t]].as_f64() - (f as f64 - stats.mu_f0) / stats.sigma_f0;
                mse += diff * diff;
                grad[[1, b, t]] = F::of(2.0 * diff / voiced as f64);
            }
        }
    }
    let mse = if voiced == 0 { 0.0 } else { mse / voiced as f64 };
    Ok((bce / frames + mse, grad))
}

/// Mean squared error over the cells of frames where `frame_mask` is true.
pub fn mel_loss(pred: &MelSpec, truth: &MelSpec, frame_mask: &[bool]) -> Result<f64> {
    if pred.values.dim() != truth.values.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.values.dim(), truth.values.dim())));
    }
    if frame_mask.len() != truth.frames() {
        return Err(Error::LengthMismatch { expected: truth.frames(), actual: frame_mask.len() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, _) in frame_mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, q) in pred.values.column(t).iter().zip(truth.values.column(t)) {
            sum += (*p as f64 - *q as f64).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Batched [`mel_loss`]; `out` is `[n_mels, B, T]`.
pub fn mel_objective<F: Real>(out: &Array3<F>, truth: &[&MelSpec], mask: &SeqMask) -> Result<(f64, Array3<F>)> {
    check_targets(mask, truth.iter().map(|m| m.frames()))?;
    let n_mels = out.dim().0;
    if let Some(m) = truth.iter().find(|m| m.n_mels() != n_mels) {
        return Err(Error::ShapeMismatch(format!("target has {} bins, network {n_mels}", m.n_mels())));
    }
    let cells = (mask.valid_count() * n_mels).max(1) as f64;
    let mut grad = Array3::<F>::zeros(out.raw_dim());
    let mut sum = 0.0;
    for (b, m) in truth.iter().enumerate() {
        let len = m.frames();
        let pred = out.slice(s![.., b, ..len]);
        let mut g = grad.slice_mut(s![.., b, ..len]);
        ndarray::Zip::from(&mut g).and(&pred).and(&m.values).for_each(|g, &p, &q| {
            let diff = p.as_f64() - q as f64;
            sum += diff * diff;
            *g = F::of(2.0 * diff / cells);
        });
    }
    Ok((sum / cells, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn duration_loss_examples() {
        let d = [1, 0, 3, 2];
        let exact: Vec<f64> = d.iter().map(|&x| log_duration(x)).collect();
        assert_eq!(duration_loss(&exact, &d, &[true; 4]).unwrap(), 0.0);

        let l = duration_loss(&[0.0, 0.0], &[1, 0], &[true, true]).unwrap();
        assert!((l - 2f64.ln().powi(2) / 2.0).abs() < 1e-12);
        assert!((l - 0.2402).abs() < 1e-4);

        let junk = duration_loss(&[0.0, 0.0, 9.0, -4.0], &[1, 0, 7, 100], &[true, true, false, false]).unwrap();
        assert_eq!(junk, l);
        assert!(duration_loss(&[0.0], &[1, 2], &[true, true]).is_err());
    }

    #[test]
    fn decode_floors_and_rounds() {
        let tokens = TokenSeq::blanked(vec![0, 3, 0, 4, 0]).unwrap();
        let pred = [-5.0, -5.0, 3f64.ln(), 4.7f64.ln(), 0.0];
        assert_eq!(decode_durations(&pred, &tokens).unwrap().0, vec![0, 1, 2, 4, 0]);
        let huge = [1e9, 1e9, f64::NAN, 0.0, 0.0];
        let d = decode_durations(&huge, &tokens).unwrap();
        assert!(d.0.iter().all(|&x| x < 1_000_000_000));
        assert_eq!(d.0[2], 0);
    }

    #[test]
    fn decode_scales_before_rounding() {
        // Adding ln(k) to ŷ multiplies exp(ŷ) by k before the "- 1" and rounding.
        let tokens = TokenSeq::plain(vec![1, 2, 3]);
        let base = [1.2f64, 2.0, 0.3];
        let k = 2.5f64;
        let shifted: Vec<f64> = base.iter().map(|y| y + k.ln()).collect();
        let d = decode_durations(&shifted, &tokens).unwrap();
        for (i, y) in base.iter().enumerate() {
            let expected = ((k * y.exp()) - 1.0).round().max(1.0) as u32;
            assert_eq!(d.0[i], expected);
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn pitch_loss_examples() {
        let stats = PitchStats { mu_f0: 150.0, sigma_f0: 50.0 };
        let f0 = PitchTrack { f0: vec![0.0, 200.0] };
        let l = pitch_loss(&[logit(0.9), logit(0.1)], &[7.0, 0.5], &f0, &stats).unwrap();
        let expected = -(0.9f64.ln() + 0.9f64.ln()) / 2.0 + 0.25;
        assert!((l - expected).abs() < 1e-6);
        assert!((l - 0.3554).abs() < 1e-4);

        let perfect = pitch_loss(&[40.0, -40.0], &[3.0, 1.0], &f0, &stats).unwrap();
        assert!(perfect < 1e-6);

        let silent = PitchTrack { f0: vec![0.0; 3] };
        let l = pitch_loss(&[40.0; 3], &[5.0, -2.0, 1.0], &silent, &stats).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn unvoiced_frames_do_not_touch_body() {
        let stats = PitchStats { mu_f0: 100.0, sigma_f0: 20.0 };
        let out = Array3::from_shape_fn((2, 1, 4), |(c, _, t)| (c * 4 + t) as f64 * 0.3 - 1.0);
        let mask = SeqMask::full(1, 4);
        let f0 = [0.0f32; 4];
        let (_, g) = pitch_objective(&out, &[&f0], &stats, &mask).unwrap();
        assert!(g.slice(s![1, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pitch_objective_matches_single() {
        let stats = PitchStats { mu_f0: 150.0, sigma_f0: 50.0 };
        let out = Array3::from_shape_vec((2, 1, 2), vec![logit(0.9), logit(0.1), 7.0, 0.5]).unwrap();
        let (l, _) = pitch_objective(&out, &[&[0.0, 200.0]], &stats, &SeqMask::full(1, 2)).unwrap();
        assert!((l - 0.35536).abs() < 1e-4);
    }

    #[test]
    fn mel_loss_examples() {
        let truth = MelSpec { values: Array2::from_shape_fn((80, 6), |(m, t)| (m as f32 * 0.1).sin() + t as f32) };
        assert_eq!(mel_loss(&truth, &truth, &[true; 6]).unwrap(), 0.0);
        let shifted = MelSpec { values: &truth.values + 0.5 };
        assert!((mel_loss(&shifted, &truth, &[true; 6]).unwrap() - 0.25).abs() < 1e-6);
        let mut mangled = shifted.clone();
        mangled.values.slice_mut(s![.., 3..]).fill(99.0);
        let half = [true, true, true, false, false, false];
        assert_eq!(mel_loss(&mangled, &truth, &half).unwrap(), mel_loss(&shifted, &truth, &half).unwrap());
        let wrong = MelSpec { values: Array2::zeros((80, 5)) };
        assert!(matches!(mel_loss(&wrong, &truth, &[true; 6]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn objectives_have_correct_gradients() {
        // Central differences on each objective with respect to its input.
        let mask = SeqMask::new(vec![3, 2]);
        let out = Array3::from_shape_fn((2, 2, 3), |(c, b, t)| ((c * 6 + b * 3 + t) as f64 * 0.7).sin());
        let stats = PitchStats { mu_f0: 120.0, sigma_f0: 30.0 };
        let f0: [&[f32]; 2] = [&[0.0, 150.0, 90.0], &[110.0, 0.0]];
        let f = |o: &Array3<f64>| pitch_objective(o, &f0, &stats, &mask).unwrap();
        check_objective(&out, &mask, f);

        let durs: [&[u32]; 2] = [&[0, 3, 1], &[2, 5]];
        let d_out = out.slice(s![..1, .., ..]).to_owned();
        check_objective(&d_out, &mask, |o| duration_objective(o, &durs, &mask).unwrap());

        let c_out = Array3::from_shape_fn((32, 2, 3), |(c, b, t)| ((c + 2 * b + 3 * t) as f64 * 0.37).cos());
        check_objective(&c_out, &mask, |o| duration_class_objective(o, &durs, &mask).unwrap());
    }

    fn check_objective(out: &Array3<f64>, mask: &SeqMask, f: impl Fn(&Array3<f64>) -> (f64, Array3<f64>)) {
        let (_, grad) = f(out);
        let h = 1e-6;
        for (idx, &g) in grad.indexed_iter() {
            if !mask.is_valid(idx.1, idx.2) {
                assert_eq!(g, 0.0);
                continue;
            }
            let mut plus = out.clone();
            plus[idx] += h;
            let mut minus = out.clone();
            minus[idx] -= h;
            let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            assert!((numeric - g).abs() < 1e-6, "{idx:?}: {numeric} vs {g}");
        }
    }
}
