//! Real-time-factor measurement of end-to-end mel synthesis.

use std::time::Instant;

use serde::Serialize;

use super::infer::Synthesizer;
use crate::audio::FeatureConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchTiming {
    pub texts: usize,
    pub chars: usize,
    pub frames: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtfReport {
    pub batch_size: usize,
    pub frames: usize,
    pub audio_secs: f64,
    pub wall_ms: f64,
    /// Seconds of audio produced per second of compute.
    pub rtf: f64,
    pub batches: Vec<BatchTiming>,
}

/// Synthesizes `texts` in batches of `batch_size` on the calling thread and
/// reports audio duration over wall time.
pub fn benchmark_rtf(synth: &Synthesizer, texts: &[String], batch_size: usize, features: &FeatureConfig) -> Result<RtfReport> {
    if texts.is_empty() || batch_size == 0 {
        return Err(Error::EmptyInput);
    }
    let mut batches = Vec::new();
    for chunk in texts.chunks(batch_size) {
        let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
        let start = Instant::now();
        let out = synth.synthesize_batch(&refs, 1.0)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        batches.push(BatchTiming {
            texts: chunk.len(),
            chars: chunk.iter().map(|t| t.chars().count()).sum(),
            frames: out.iter().map(|s| s.mel.frames()).sum(),
            wall_ms,
        });
    }
    let frames: usize = batches.iter().map(|b| b.frames).sum();
    let wall_ms: f64 = batches.iter().map(|b| b.wall_ms).sum();
    let audio_secs = frames as f64 * features.frame_secs();
    Ok(RtfReport { batch_size, frames, audio_secs, wall_ms, rtf: audio_secs / (wall_ms * 1e-3).max(1e-12), batches })
}

/// Least-squares line through `(x, y)`: slope, intercept and R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let (s, i, r2) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
