//! Log-mel extraction: Hann-windowed magnitude STFT projected on an HTK mel
//! filterbank.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 48_000,
            win_length: 960,
            hop_length: 240,
            n_fft: 1024,
            n_mels: 120,
            fmin: 0.0,
            fmax: 24_000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop_length == 0 || self.n_mels == 0 || self.n_fft < self.win_length {
            return Err(Error::Config(format!("invalid mel configuration {self:?}")));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("mel range {}..{} Hz is invalid", self.fmin, self.fmax)));
        }
        Ok(())
    }

    pub fn n_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.win_length).then(|| 1 + (samples - self.win_length) / self.hop_length)
    }

    /// `n_mels + 2` band edges in Hz, equally spaced on the mel scale.
    pub fn band_edges(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// Center frequency of every mel filter.
    pub fn centers(&self) -> Vec<f64> {
        self.band_edges()[1..=self.n_mels].to_vec()
    }

    /// `[n_mels, n_fft / 2 + 1]` filter weights.
    ///
    /// Each weight is the mean of the unit-peak triangle over the frequency
    /// interval the FFT bin represents. The narrow low filters are thinner
    /// than one bin at this resolution and would be empty under point
    /// sampling of the triangle at bin centers.
    pub fn filterbank(&self) -> Tensor<f64> {
        let n_bins = self.n_fft / 2 + 1;
        let df = self.sample_rate as f64 / self.n_fft as f64;
        let edges = self.band_edges();
        let mut fb = Tensor::zeros([self.n_mels, n_bins]);
        let data = fb.data_mut();
        for m in 0..self.n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let (a, b) = ((k as f64 - 0.5) * df, (k as f64 + 0.5) * df);
                data[m * n_bins + k] = triangle_integral(lo, c, hi, a, b) / df;
            }
        }
        fb
    }
}

fn linear_integral(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b > a {
        0.5 * (f(a) + f(b)) * (b - a)
    } else {
        0.0
    }
}

/// Integral over `[a, b]` of the triangle rising from `lo` to 1 at `c` and
/// falling to 0 at `hi`.
fn triangle_integral(lo: f64, c: f64, hi: f64, a: f64, b: f64) -> f64 {
    let rise = linear_integral(|x| (x - lo) / (c - lo), a.max(lo), b.min(c));
    let fall = linear_integral(|x| (hi - x) / (hi - c), a.max(c), b.min(hi));
    rise + fall
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Tensor<f64>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MelExtractor {
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window: hann(cfg.win_length),
            filters: cfg.filterbank(),
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &Tensor<f64> {
        &self.filters
    }

    /// `[T, n_mels]` natural-log mel magnitudes, floored at [`LOG_FLOOR`].
    pub fn extract(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let cfg = &self.cfg;
        let t = cfg.n_frames(samples.len()).ok_or_else(|| Error::InputTooShort {
            op: "extract_mel",
            detail: format!("{} samples, one window needs {}", samples.len(), cfg.win_length),
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(t * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut mag = vec![0.0; n_bins];
        for frame in 0..t {
            let start = frame * cfg.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (c, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                c.re = samples[start + i] as f64 * w;
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for row in self.filters.data().chunks_exact(n_bins) {
                let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        Tensor::new([t, cfg.n_mels], out)
    }
}

pub fn extract_mel(samples: &[f32], cfg: &MelConfig) -> Result<Tensor<f32>> {
    MelExtractor::new(*cfg)?.extract(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_counts() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.n_frames(48_000), Some(197));
        assert_eq!(cfg.n_frames(960), Some(1));
        assert_eq!(cfg.n_frames(959), None);
        assert!(extract_mel(&[0.0; 959], &cfg).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 1000.0, 24_000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn triangle_integral_total_area() {
        let area = triangle_integral(100.0, 200.0, 400.0, -1e9, 1e9);
        assert!((area - 150.0).abs() < 1e-9);
        assert_eq!(triangle_integral(100.0, 200.0, 400.0, 500.0, 600.0), 0.0);
    }
}
