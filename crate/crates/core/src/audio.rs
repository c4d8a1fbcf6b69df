//! Log-mel spectrograms, frame-aligned F0 tracks and corpus pitch statistics.
//!
//! Both extractors share one framing: frame `i` is centered on sample
//! `i * hop` of the reflect-padded signal, so a waveform of `n` samples always
//! yields `1 + n / hop` frames of each.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Tensor;

/// Mono audio, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::RateMismatch { expected: 1, actual: 0 });
        }
        if samples.is_empty() {
            return Err(Error::TooShort { len: 0, min: 1 });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis parameters shared by the mel and F0 extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper edge of the filterbank; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
    pub rms_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            window_ms: 50.0,
            hop_ms: 12.5,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-5,
            f0_min: 65.0,
            f0_max: 400.0,
            voicing_threshold: 0.3,
            rms_threshold: 1e-4,
        }
    }
}

impl FeatureConfig {
    /// Window length in samples. Ties round to even, giving 1102 at 22.05 kHz.
    pub fn window_len(&self) -> usize {
        (self.window_ms * 1e-3 * self.sample_rate as f64).round_ties_even() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * 1e-3 * self.sample_rate as f64).round_ties_even() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Frame count for a signal of `n_samples`.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_len()
    }

    pub fn frame_secs(&self) -> f64 {
        self.hop_len() as f64 / self.sample_rate as f64
    }

    fn check(&self, wave: &Waveform) -> Result<()> {
        if wave.sample_rate != self.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.sample_rate,
                actual: wave.sample_rate,
            });
        }
        if self.window_len() < 2 || self.hop_len() == 0 {
            return Err(Error::ConfigInvalid("window and hop must be positive".into()));
        }
        if wave.samples.len() < self.hop_len() {
            return Err(Error::TooShort {
                len: wave.samples.len(),
                min: self.hop_len(),
            });
        }
        Ok(())
    }
}

/// Natural-log mel magnitudes, shape `[n_mels, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f32>,
}

impl MelSpec {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_array2(&self.values)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        Ok(Self { values: t.into_array2()? })
    }
}

/// Per-frame F0 in Hz; 0.0 marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PitchTrack {
    pub f0: Vec<f32>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0.iter().filter(|&&f| f > 0.0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.f0.len()],
            data: self.f0.clone(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.dims.len() != 1 {
            return Err(Error::ShapeMismatch(format!("pitch track must be 1-D, got {:?}", t.dims)));
        }
        Ok(Self { f0: t.data })
    }
}

/// Corpus-level statistics of voiced F0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub mu_f0: f64,
    pub sigma_f0: f64,
}

impl PitchStats {
    /// Smallest standard deviation reported; guards the loss normalization.
    pub const SIGMA_FLOOR: f64 = 1.0;

    pub fn normalize(&self, f0: f32) -> f32 {
        ((f0 as f64 - self.mu_f0) / self.sigma_f0) as f32
    }

    pub fn denormalize(&self, z: f32) -> f32 {
        (z as f64 * self.sigma_f0 + self.mu_f0) as f32
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies of the triangular filters: `n_mels + 2` points equally spaced in mel.
pub fn mel_band_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max());
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Unnormalized triangular mel filterbank, shape `[n_mels, n_fft / 2 + 1]`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let n_fft = cfg.n_fft();
    let n_bins = n_fft / 2 + 1;
    let edges = mel_band_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = k as f64 * bin_hz;
        if f > lo && f < center {
            (f - lo) / (center - lo)
        } else if f >= center && f < hi {
            (hi - f) / (hi - center)
        } else {
            0.0
        }
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Copies the window-length slice centered on `center` (reflect-padded) into `out`.
fn frame_samples(samples: &[f32], center: usize, out: &mut [f64]) {
    let half = out.len() as isize / 2;
    let start = center as isize - half;
    let n = samples.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = samples[reflect(start + j as isize, n)] as f64;
    }
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    frame: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Stft {
    fn new(cfg: &FeatureConfig) -> Self {
        let n_fft = cfg.n_fft();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            window: hann_window(cfg.window_len()),
            frame: vec![0.0; cfg.window_len()],
            buf: vec![Complex::default(); n_fft],
            scratch,
        }
    }

    fn magnitudes(&mut self, samples: &[f32], center: usize, out: &mut Array1<f64>) {
        frame_samples(samples, center, &mut self.frame);
        for (b, (x, w)) in self.buf.iter_mut().zip(self.frame.iter().zip(&self.window)) {
            *b = Complex::new(x * w, 0.0);
        }
        for b in self.buf[self.window.len()..].iter_mut() {
            *b = Complex::default();
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = b.norm();
        }
    }
}

/// Log-mel spectrogram: Hann-windowed STFT magnitudes through the mel
/// filterbank, then `ln(max(energy, floor))`.
pub fn compute_log_mel(wave: &Waveform, cfg: &FeatureConfig) -> Result<MelSpec> {
    cfg.check(wave)?;
    let frames = cfg.num_frames(wave.samples.len());
    let fb = mel_filterbank(cfg);
    let mut stft = Stft::new(cfg);
    let mut mag = Array1::<f64>::zeros(cfg.n_fft() / 2 + 1);
    let mut values = Array2::<f32>::zeros((cfg.n_mels, frames));
    for t in 0..frames {
        stft.magnitudes(&wave.samples, t * cfg.hop_len(), &mut mag);
        let energy = fb.dot(&mag);
        for (m, e) in energy.iter().enumerate() {
            values[[m, t]] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(MelSpec { values })
}

/// Normalized autocorrelation of `x` at lags `lags.0 ..= lags.1`.
fn normalized_autocorr(x: &[f64], lags: (usize, usize)) -> Vec<f64> {
    let w = x.len();
    (lags.0..=lags.1)
        .map(|lag| {
            let (a, b) = (&x[..w - lag], &x[lag..]);
            let mut num = 0.0;
            let mut ea = 0.0;
            let mut eb = 0.0;
            for (p, q) in a.iter().zip(b) {
                num += p * q;
                ea += p * p;
                eb += q * q;
            }
            let den = (ea * eb).sqrt();
            if den > 0.0 { num / den } else { 0.0 }
        })
        .collect()
}

/// Autocorrelation pitch estimate for one frame; `None` when unvoiced.
fn frame_f0(x: &[f64], cfg: &FeatureConfig) -> Option<f64> {
    let sr = cfg.sample_rate as f64;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms < cfg.rms_threshold {
        return None;
    }
    let lag_min = (sr / cfg.f0_max).floor() as usize;
    let lag_max = ((sr / cfg.f0_min).ceil() as usize).min(x.len() - 2);
    if lag_min < 2 || lag_max <= lag_min {
        return None;
    }
    // One extra lag on each side so the range ends can be tested as local maxima.
    let lo = lag_min - 1;
    let r = normalized_autocorr(x, (lo, lag_max + 1));
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > r[i - 1] && r[i] >= r[i + 1])
        .collect();
    let best = peaks.iter().map(|&i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    if !(best >= cfg.voicing_threshold) {
        return None;
    }
    // Prefer the shortest period whose peak is close to the best one; longer
    // lags at multiples of the period score nearly as high.
    let i = *peaks.iter().find(|&&i| r[i] >= 0.9 * best)?;
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = (lo + i) as f64 + shift;
    Some((sr / lag).clamp(cfg.f0_min, cfg.f0_max))
}

/// Frame-aligned F0 by normalized-autocorrelation peak picking.
pub fn extract_f0(wave: &Waveform, cfg: &FeatureConfig) -> Result<PitchTrack> {
    cfg.check(wave)?;
    let frames = cfg.num_frames(wave.samples.len());
    let mut buf = vec![0.0; cfg.window_len()];
    let f0 = (0..frames)
        .map(|t| {
            frame_samples(&wave.samples, t * cfg.hop_len(), &mut buf);
            frame_f0(&buf, cfg).map_or(0.0, |f| f as f32)
        })
        .collect();
    Ok(PitchTrack { f0 })
}

/// Mean and population standard deviation of voiced F0 over all tracks.
pub fn compute_f0_stats<'a>(tracks: impl IntoIterator<Item = &'a PitchTrack>) -> Result<PitchStats> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let voiced: Vec<f64> = tracks
        .into_iter()
        .flat_map(|t| t.f0.iter())
        .filter(|&&f| f > 0.0)
        .map(|&f| f as f64)
        .collect();
    for &f in &voiced {
        n += 1;
        sum += f;
    }
    if n == 0 {
        return Err(Error::NoVoicedFrames);
    }
    let mu = sum / n as f64;
    for &f in &voiced {
        sum_sq += (f - mu) * (f - mu);
    }
    let sigma = (sum_sq / n as f64).sqrt().max(PitchStats::SIGMA_FLOOR);
    Ok(PitchStats { mu_f0: mu, sigma_f0: sigma })
}
