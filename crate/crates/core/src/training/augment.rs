//! Stem-level data augmentation: random gain, equal-power panning, and a
//! random shelving biquad. The mixture is recomputed as the sum of the
//! augmented stems by the caller.

use crate::source::PerSource;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which augmentations are active; all off means identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub gain: bool,
    pub pan: bool,
    pub filter: bool,
}

impl AugmentConfig {
    pub fn off() -> AugmentConfig {
        AugmentConfig {
            gain: false,
            pan: false,
            filter: false,
        }
    }

    pub fn all() -> AugmentConfig {
        AugmentConfig {
            gain: true,
            pan: true,
            filter: true,
        }
    }

    pub fn enabled(&self) -> bool {
        self.gain || self.pan || self.filter
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::off()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShelfKind {
    Low,
    High,
}

/// Concrete draw of augmentation parameters for one stem.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Linear gain in [0.5, 1.5]; 1 = identity.
    pub gain: f64,
    /// Pan angle in [0, pi/2]; pi/4 = centred (equal-power law).
    pub pan: f64,
    pub shelf_kind: ShelfKind,
    /// Shelf corner frequency in Hz.
    pub shelf_freq: f64,
    /// Shelf gain in [-6, 6] dB; 0 = identity.
    pub shelf_gain_db: f64,
}

impl AugmentParams {
    pub fn identity() -> AugmentParams {
        AugmentParams {
            gain: 1.0,
            pan: std::f64::consts::FRAC_PI_4,
            shelf_kind: ShelfKind::Low,
            shelf_freq: 1000.0,
            shelf_gain_db: 0.0,
        }
    }
}

/// Draw per-stem parameters; disabled components get their identity value.
pub fn draw_params(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    sample_rate: u32,
) -> PerSource<AugmentParams> {
    PerSource::from_fn(|_| {
        let mut p = AugmentParams::identity();
        if cfg.gain {
            p.gain = rng.gen_range(0.5..1.5);
        }
        if cfg.pan {
            p.pan = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
        }
        if cfg.filter {
            p.shelf_kind = if rng.gen_bool(0.5) {
                ShelfKind::Low
            } else {
                ShelfKind::High
            };
            let max_freq = (sample_rate as f64 * 0.45).min(4000.0);
            p.shelf_freq = rng.gen_range(100.0..max_freq);
            p.shelf_gain_db = rng.gen_range(-6.0..6.0);
        }
        p
    })
}

/// RBJ audio-EQ shelving biquad (slope 1), direct form I, zero initial state.
fn shelf_filter(samples: &mut [f64], kind: ShelfKind, freq: f64, gain_db: f64, sr: f64) {
    if gain_db == 0.0 {
        return;
    }
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * std::f64::consts::PI * freq / sr;
    let (cos_w0, sin_w0) = (w0.cos(), w0.sin());
    let alpha = sin_w0 / 2.0 * std::f64::consts::SQRT_2;
    let two_sqrt_a_alpha = 2.0 * a.sqrt() * alpha;
    let (b0, b1, b2, a0, a1, a2) = match kind {
        ShelfKind::Low => (
            a * ((a + 1.0) - (a - 1.0) * cos_w0 + two_sqrt_a_alpha),
            2.0 * a * ((a - 1.0) - (a + 1.0) * cos_w0),
            a * ((a + 1.0) - (a - 1.0) * cos_w0 - two_sqrt_a_alpha),
            (a + 1.0) + (a - 1.0) * cos_w0 + two_sqrt_a_alpha,
            -2.0 * ((a - 1.0) + (a + 1.0) * cos_w0),
            (a + 1.0) + (a - 1.0) * cos_w0 - two_sqrt_a_alpha,
        ),
        ShelfKind::High => (
            a * ((a + 1.0) + (a - 1.0) * cos_w0 + two_sqrt_a_alpha),
            -2.0 * a * ((a - 1.0) + (a + 1.0) * cos_w0),
            a * ((a + 1.0) + (a - 1.0) * cos_w0 - two_sqrt_a_alpha),
            (a + 1.0) - (a - 1.0) * cos_w0 + two_sqrt_a_alpha,
            2.0 * ((a - 1.0) - (a + 1.0) * cos_w0),
            (a + 1.0) - (a - 1.0) * cos_w0 - two_sqrt_a_alpha,
        ),
    };
    let (b0, b1, b2, a1, a2) = (b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for s in samples.iter_mut() {
        let x0 = *s;
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *s = y0;
    }
}

/// Apply one stem's parameters to a stereo buffer.
pub fn apply_params(stem: &[Vec<f64>], p: &AugmentParams, sample_rate: u32) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = stem.to_vec();
    // Equal-power pan: scaled so the centre position is the exact identity.
    let (gl, gr) = if p.pan == std::f64::consts::FRAC_PI_4 {
        (1.0, 1.0)
    } else {
        (
            std::f64::consts::SQRT_2 * p.pan.cos(),
            std::f64::consts::SQRT_2 * p.pan.sin(),
        )
    };
    let channel_gains = [p.gain * gl, p.gain * gr];
    for (ch, buf) in out.iter_mut().enumerate() {
        let g = channel_gains[ch.min(1)];
        for v in buf.iter_mut() {
            *v *= g;
        }
        shelf_filter(buf, p.shelf_kind, p.shelf_freq, p.shelf_gain_db, sample_rate as f64);
    }
    out
}

/// Augment all four stems with independently drawn parameters.
pub fn augment_stems(
    stems: &PerSource<Vec<Vec<f64>>>,
    cfg: &AugmentConfig,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> PerSource<Vec<Vec<f64>>> {
    let params = draw_params(rng, cfg, sample_rate);
    stems.map(|s, stem| apply_params(stem, &params[s], sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::SourceId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stereo_ramp(n: usize) -> Vec<Vec<f64>> {
        vec![
            (0..n).map(|i| (i as f64 * 0.37).sin() * 0.5).collect(),
            (0..n).map(|i| (i as f64 * 0.11).cos() * 0.5).collect(),
        ]
    }

    fn four_stems(n: usize) -> PerSource<Vec<Vec<f64>>> {
        PerSource::from_fn(|_| stereo_ramp(n))
    }

    #[test]
    fn all_switches_off_is_identity() {
        let stems = four_stems(300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_stems(&stems, &AugmentConfig::off(), 8000, &mut rng);
        for s in SourceId::ALL {
            assert_eq!(out[s], stems[s]);
        }
    }

    #[test]
    fn forced_gain_doubles_the_waveform() {
        let stem = stereo_ramp(200);
        let mut p = AugmentParams::identity();
        p.gain = 2.0;
        let out = apply_params(&stem, &p, 8000);
        for c in 0..2 {
            for (o, i) in out[c].iter().zip(stem[c].iter()) {
                assert!((o - 2.0 * i).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pan_preserves_total_power() {
        let stem = stereo_ramp(4000);
        let power = |b: &[Vec<f64>]| -> f64 {
            b.iter()
                .flat_map(|c| c.iter())
                .map(|v| v * v)
                .sum::<f64>()
        };
        // Equal channel powers make the pan law exactly power-preserving.
        let mut equal = stem.clone();
        equal[1] = equal[0].clone();
        let before = power(&equal);
        for pan in [0.0, 0.3, std::f64::consts::FRAC_PI_4, 1.2] {
            let mut p = AugmentParams::identity();
            p.pan = pan;
            let out = apply_params(&equal, &p, 8000);
            let after = power(&out);
            assert!(
                (after - before).abs() / before < 1e-12,
                "pan {pan}: {after} vs {before}"
            );
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let stems = four_stems(500);
        let cfg = AugmentConfig::all();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = augment_stems(&stems, &cfg, 8000, &mut r1);
        let b = augment_stems(&stems, &cfg, 8000, &mut r2);
        for s in SourceId::ALL {
            assert_eq!(a[s], b[s]);
        }
        // And it actually changes the signal.
        assert_ne!(a[SourceId::Vocals], stems[SourceId::Vocals]);
    }

    #[test]
    fn shelf_boosts_the_expected_band() {
        // A low shelf with +6 dB should raise a low tone's energy and leave
        // a high tone nearly untouched.
        let sr = 8000.0;
        let tone = |f: f64| -> Vec<f64> {
            (0..8000)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin())
                .collect()
        };
        let energy = |b: &[f64]| b.iter().map(|v| v * v).sum::<f64>();
        let mut low = tone(50.0);
        let mut high = tone(3000.0);
        let e_low_before = energy(&low);
        let e_high_before = energy(&high);
        shelf_filter(&mut low, ShelfKind::Low, 500.0, 6.0, sr);
        shelf_filter(&mut high, ShelfKind::Low, 500.0, 6.0, sr);
        assert!(energy(&low) / e_low_before > 2.5); // ~ +6 dB in power is 4x
        assert!((energy(&high) / e_high_before - 1.0).abs() < 0.2);
    }
}
