//! Full-signal separation: run a trained model over a mixture and
//! reconstruct the four stems with the mixture's phase.

use crate::dsp::{
    denormalize, magnitude, normalize, reconstruct, stft, MagnitudeSpectrogram,
    NormalizationStats, StftConfig,
};
use crate::error::{Error, Result};
use crate::model::{SharedModel, SingleTaskModel};
use crate::source::{PerSource, SourceId};
use crate::tensor::{Mode, Tensor};

/// Either one shared-encoder model or four independent networks presenting
/// the same separation surface.
pub enum ModelSet {
    Shared(SharedModel),
    Independent(PerSource<SingleTaskModel>),
}

impl ModelSet {
    pub fn io_shape(&self) -> (usize, usize, usize) {
        match self {
            ModelSet::Shared(m) => m.io_shape,
            ModelSet::Independent(ms) => ms[SourceId::Vocals].io_shape,
        }
    }

    fn estimate(&self, x: &Tensor) -> Result<PerSource<Tensor>> {
        match self {
            ModelSet::Shared(m) => m.forward(x, Mode::Eval),
            ModelSet::Independent(ms) => {
                PerSource::try_from_fn(|s| ms[s].forward(x, Mode::Eval))
            }
        }
    }
}

/// Separate one mixture into the four stems.
///
/// The mixture is analyzed once; its normalized magnitude is processed in
/// non-overlapping patches of the model's frame length (the final partial
/// patch is zero-padded and trimmed), the estimates are denormalized, and
/// each stem is synthesized with the mixture phase. Outputs have exactly
/// the input length; the tail beyond the analysis span is silent.
pub fn separate_song(
    models: &ModelSet,
    stft_cfg: &StftConfig,
    norm: &NormalizationStats,
    mixture: &[Vec<f64>],
) -> Result<PerSource<Vec<Vec<f64>>>> {
    let (c_io, l_patch, k_bins) = models.io_shape();
    if mixture.len() != c_io {
        return Err(Error::ChannelCount {
            expected: c_io,
            got: mixture.len(),
        });
    }
    let input_len = mixture[0].len();
    let phase = stft(mixture, stft_cfg)?;
    if phase.bins() != k_bins {
        return Err(Error::ShapeMismatch(format!(
            "front-end produces {} bins, model expects {}",
            phase.bins(),
            k_bins
        )));
    }
    let mag = magnitude(&phase);
    let normed = normalize(&mag, norm)?;
    let frames = normed.frames();

    let mut est_data: PerSource<Vec<f64>> =
        PerSource::from_fn(|_| vec![0.0; c_io * frames * k_bins]);
    let n_patches = frames.div_ceil(l_patch);
    let sample = c_io * l_patch * k_bins;
    for p in 0..n_patches {
        let start = p * l_patch;
        let valid = (frames - start).min(l_patch);
        let mut x = vec![0.0; sample];
        for c in 0..c_io {
            for l in 0..valid {
                let src_base = (c * frames + start + l) * k_bins;
                let dst_base = (c * l_patch + l) * k_bins;
                x[dst_base..dst_base + k_bins]
                    .copy_from_slice(&normed.data()[src_base..src_base + k_bins]);
            }
        }
        let input = Tensor::from_vec(&[1, c_io, l_patch, k_bins], x)?;
        let outs = models.estimate(&input)?;
        for (s, out) in outs.iter() {
            let od = out.data();
            let dst = &mut est_data[s];
            for c in 0..c_io {
                for l in 0..valid {
                    let src_base = (c * l_patch + l) * k_bins;
                    let dst_base = (c * frames + start + l) * k_bins;
                    dst[dst_base..dst_base + k_bins]
                        .copy_from_slice(&od[src_base..src_base + k_bins]);
                }
            }
        }
    }

    PerSource::try_from_fn(|s| {
        let est =
            MagnitudeSpectrogram::new(stft_cfg.clone(), c_io, frames, k_bins, est_data[s].clone())?;
        let denormed = denormalize(&est, norm)?;
        let mut samples = reconstruct(&denormed, &phase)?;
        for ch in samples.iter_mut() {
            ch.resize(input_len, 0.0);
        }
        Ok(samples)
    })
}
