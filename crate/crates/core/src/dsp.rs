//! Time-frequency front-end: STFT analysis, magnitude extraction, per-bin
//! normalization, patch extraction, and overlap-add reconstruction of a
//! waveform from an estimated magnitude plus the mixture phase.
//!
//! Frames are taken directly off the signal without edge padding: frame `l`
//! covers samples `[l*hop, l*hop + window_size)`, so a signal of `len`
//! samples yields `(len - window_size) / hop + 1` frames and reconstruction
//! covers exactly that analysis span.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Floor applied to per-bin standard deviations so silent bins never divide
/// by (near) zero.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

/// Analysis configuration shared by every spectrogram derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
    pub sample_rate: u32,
}

impl StftConfig {
    /// Validates that the window is even, the hop divides into it sensibly,
    /// and the (window, hop) pair overlap-adds to a constant within 1e-10.
    pub fn new(window_size: usize, hop: usize, sample_rate: u32) -> Result<StftConfig> {
        if window_size == 0 || window_size % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "window_size must be even and positive, got {window_size}"
            )));
        }
        if hop == 0 || hop > window_size {
            return Err(Error::InvalidInput(format!(
                "hop must be in 1..=window_size, got {hop}"
            )));
        }
        let cfg = StftConfig {
            window_size,
            hop,
            window_kind: WindowKind::Hann,
            sample_rate,
        };
        let w = cfg.window();
        // Constant-overlap-add: the tiling sum of the window at this hop must
        // be flat. The sum as a function of absolute position is periodic in
        // the hop, so checking one period suffices.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..hop {
            let mut s = 0.0;
            let mut i = r;
            while i < window_size {
                s += w[i];
                i += hop;
            }
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if hi - lo > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "window/hop pair ({window_size}, {hop}) violates constant overlap-add \
                 (spread {:.3e})",
                hi - lo
            )));
        }
        Ok(cfg)
    }

    /// 2048-sample window, 75% overlap, 44.1 kHz.
    pub fn default_full_rate() -> StftConfig {
        StftConfig::new(2048, 512, 44100).expect("default config is COLA")
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size;
        (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect()
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for_len(&self, len: usize) -> Option<usize> {
        if len < self.window_size {
            None
        } else {
            Some((len - self.window_size) / self.hop + 1)
        }
    }

    /// Samples covered by `frames` frames.
    pub fn span_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_size
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig::default_full_rate()
    }
}

/// Complex STFT values shaped (channels, frames, bins) with
/// `bins = window_size/2 + 1`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub config: StftConfig,
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<Complex<f64>>,
}

impl ComplexSpectrogram {
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn at(&self, c: usize, l: usize, k: usize) -> Complex<f64> {
        self.data[(c * self.frames + l) * self.bins + k]
    }
    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }
}

/// Non-negative magnitudes shaped (channels, frames, bins).
#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    pub config: StftConfig,
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl MagnitudeSpectrogram {
    pub fn new(
        config: StftConfig,
        channels: usize,
        frames: usize,
        bins: usize,
        data: Vec<f64>,
    ) -> Result<MagnitudeSpectrogram> {
        if data.len() != channels * frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "magnitude data length {} != {channels}x{frames}x{bins}",
                data.len()
            )));
        }
        Ok(MagnitudeSpectrogram {
            config,
            channels,
            frames,
            bins,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn at(&self, c: usize, l: usize, k: usize) -> f64 {
        self.data[(c * self.frames + l) * self.bins + k]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-bin standard deviations over a training database, floored at
/// `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_bin_std: Vec<f64>,
    pub epsilon: f64,
}

impl NormalizationStats {
    pub fn bins(&self) -> usize {
        self.per_bin_std.len()
    }
}

fn plan_forward(n: usize) -> Arc<dyn rustfft::Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn plan_inverse(n: usize) -> Arc<dyn rustfft::Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Windowed DFT of every channel.
pub fn stft(signal: &[Vec<f64>], config: &StftConfig) -> Result<ComplexSpectrogram> {
    if signal.is_empty() {
        return Err(Error::InvalidInput("stft: no channels".into()));
    }
    let len = signal[0].len();
    if signal.iter().any(|ch| ch.len() != len) {
        return Err(Error::InvalidInput(
            "stft: channels have different lengths".into(),
        ));
    }
    let frames = config.frames_for_len(len).ok_or_else(|| {
        Error::InvalidInput(format!(
            "stft: signal of {len} samples is shorter than one window ({})",
            config.window_size
        ))
    })?;
    let w = config.window();
    let n = config.window_size;
    let bins = config.bins();
    let fft = plan_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut data = Vec::with_capacity(signal.len() * frames * bins);
    for ch in signal {
        for l in 0..frames {
            let start = l * config.hop;
            for i in 0..n {
                buf[i] = Complex::new(ch[start + i] * w[i], 0.0);
            }
            fft.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
    }
    Ok(ComplexSpectrogram {
        config: config.clone(),
        channels: signal.len(),
        frames,
        bins,
        data,
    })
}

/// Elementwise complex modulus.
pub fn magnitude(spec: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        config: spec.config.clone(),
        channels: spec.channels,
        frames: spec.frames,
        bins: spec.bins,
        data: spec.data.iter().map(|z| z.norm()).collect(),
    }
}

/// Inverse STFT of `estimate * exp(i * arg(mixture_phase))` by weighted
/// overlap-add with window-energy normalization.
///
/// Output length equals the analysis span `(frames-1)*hop + window_size`.
/// Samples inside the span reconstruct exactly for a COLA window; the first
/// and last half-window are approximate because fewer frames overlap there.
pub fn reconstruct(
    estimate: &MagnitudeSpectrogram,
    mixture_phase: &ComplexSpectrogram,
) -> Result<Vec<Vec<f64>>> {
    if estimate.channels != mixture_phase.channels
        || estimate.frames != mixture_phase.frames
        || estimate.bins != mixture_phase.bins
    {
        return Err(Error::ShapeMismatch(format!(
            "reconstruct: estimate ({},{},{}) vs phase ({},{},{})",
            estimate.channels,
            estimate.frames,
            estimate.bins,
            mixture_phase.channels,
            mixture_phase.frames,
            mixture_phase.bins
        )));
    }
    if estimate.config != mixture_phase.config {
        return Err(Error::ShapeMismatch(
            "reconstruct: estimate and phase use different stft configs".into(),
        ));
    }
    let cfg = &estimate.config;
    let n = cfg.window_size;
    let bins = cfg.bins();
    let w = cfg.window();
    let span = cfg.span_for_frames(estimate.frames);
    let ifft = plan_inverse(n);
    let mut out = vec![vec![0.0; span]; estimate.channels];
    let mut wsum = vec![0.0; span];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for c in 0..estimate.channels {
        for l in 0..estimate.frames {
            for k in 0..bins {
                let z = mixture_phase.at(c, l, k);
                let mag = z.norm();
                let unit = if mag > 0.0 {
                    z / mag
                } else {
                    Complex::new(1.0, 0.0)
                };
                buf[k] = unit * estimate.at(c, l, k);
            }
            for k in bins..n {
                buf[k] = buf[n - k].conj();
            }
            ifft.process(&mut buf);
            let start = l * cfg.hop;
            for i in 0..n {
                let sample = buf[i].re / n as f64;
                out[c][start + i] += sample * w[i];
                if c == 0 {
                    wsum[start + i] += w[i] * w[i];
                }
            }
        }
    }
    for ch in out.iter_mut() {
        for (s, &ws) in ch.iter_mut().zip(wsum.iter()) {
            if ws > 1e-12 {
                *s /= ws;
            }
        }
    }
    Ok(out)
}

/// Population standard deviation per frequency bin over a stream of
/// magnitude spectrograms (all channels and frames pooled), floored at
/// `DEFAULT_NORM_EPS`.
pub fn fit_normalization<'a, I>(stream: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a MagnitudeSpectrogram>,
{
    let mut bins = 0usize;
    let mut count = 0u64;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for spec in stream {
        if bins == 0 {
            bins = spec.bins;
            mean = vec![0.0; bins];
            m2 = vec![0.0; bins];
        } else if spec.bins != bins {
            return Err(Error::InvalidInput(format!(
                "fit_normalization: bin count changed from {bins} to {}",
                spec.bins
            )));
        }
        for c in 0..spec.channels {
            for l in 0..spec.frames {
                count += 1;
                let base = (c * spec.frames + l) * bins;
                let row = &spec.data[base..base + bins];
                let n = count as f64;
                for k in 0..bins {
                    let delta = row[k] - mean[k];
                    mean[k] += delta / n;
                    m2[k] += delta * (row[k] - mean[k]);
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "fit_normalization: empty spectrogram stream".into(),
        ));
    }
    let per_bin_std = m2
        .iter()
        .map(|&s| (s / count as f64).sqrt().max(DEFAULT_NORM_EPS))
        .collect();
    Ok(NormalizationStats {
        per_bin_std,
        epsilon: DEFAULT_NORM_EPS,
    })
}

fn scale_bins(
    spec: &MagnitudeSpectrogram,
    stats: &NormalizationStats,
    invert: bool,
) -> Result<MagnitudeSpectrogram> {
    if stats.bins() != spec.bins {
        return Err(Error::InvalidInput(format!(
            "normalization stats have {} bins, spectrogram has {}",
            stats.bins(),
            spec.bins
        )));
    }
    let mut out = spec.clone();
    for c in 0..spec.channels {
        for l in 0..spec.frames {
            let base = (c * spec.frames + l) * spec.bins;
            for k in 0..spec.bins {
                let s = stats.per_bin_std[k];
                out.data[base + k] = if invert {
                    spec.data[base + k] * s
                } else {
                    spec.data[base + k] / s
                };
            }
        }
    }
    Ok(out)
}

/// Divide every bin by its training-set standard deviation.
pub fn normalize(
    spec: &MagnitudeSpectrogram,
    stats: &NormalizationStats,
) -> Result<MagnitudeSpectrogram> {
    scale_bins(spec, stats, false)
}

/// Inverse of [`normalize`].
pub fn denormalize(
    spec: &MagnitudeSpectrogram,
    stats: &NormalizationStats,
) -> Result<MagnitudeSpectrogram> {
    scale_bins(spec, stats, true)
}

/// Start offsets of every full patch of `patch_frames` frames at the given
/// hop; a trailing partial patch is dropped.
pub fn patch_starts(frames: usize, patch_frames: usize, hop_frames: usize) -> Vec<usize> {
    assert!(patch_frames >= 1 && hop_frames >= 1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch_frames <= frames {
        starts.push(s);
        s += hop_frames;
    }
    starts
}

/// Cut a spectrogram into fixed-length patches along the frame axis.
///
/// Returns an empty list (not an error) when the input is shorter than one
/// patch.
pub fn extract_patches(
    spec: &MagnitudeSpectrogram,
    patch_frames: usize,
    hop_frames: usize,
) -> Vec<MagnitudeSpectrogram> {
    patch_starts(spec.frames, patch_frames, hop_frames)
        .into_iter()
        .map(|start| {
            let mut data = Vec::with_capacity(spec.channels * patch_frames * spec.bins);
            for c in 0..spec.channels {
                let base = (c * spec.frames + start) * spec.bins;
                data.extend_from_slice(&spec.data[base..base + patch_frames * spec.bins]);
            }
            MagnitudeSpectrogram {
                config: spec.config.clone(),
                channels: spec.channels,
                frames: patch_frames,
                bins: spec.bins,
                data,
            }
        })
        .collect()
}
