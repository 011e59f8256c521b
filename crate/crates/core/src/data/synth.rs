//! Deterministic synthetic corpus generator.
//!
//! Four spectrally distinguishable sources per song: bass notes below
//! ~200 Hz, broadband drum bursts, harmonic vocal glides in the 200-1000 Hz
//! fundamental range, and sustained mid-range tones for "other". The
//! mixture is the exact elementwise sum of the stems.

use crate::error::{Error, Result};
use crate::source::{PerSource, SourceId};
use crate::util::mix_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Song;

/// Event-level knobs for one source generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceGenParams {
    /// Fundamental frequency range in Hz.
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Event duration range in seconds.
    pub event_len: (f64, f64),
    /// Silence between events in seconds.
    pub gap_len: (f64, f64),
    /// Peak amplitude range per event.
    pub amp: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_songs: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub sources: PerSource<SourceGenParams>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_songs: 24,
            duration_s: 6.0,
            sample_rate: 8000,
            seed: 7,
            sources: PerSource::new([
                // vocals: harmonic glides
                SourceGenParams {
                    freq_lo: 200.0,
                    freq_hi: 1000.0,
                    event_len: (0.4, 1.0),
                    gap_len: (0.05, 0.3),
                    amp: (0.12, 0.25),
                },
                // drums: broadband bursts
                SourceGenParams {
                    freq_lo: 0.0,
                    freq_hi: 0.0,
                    event_len: (0.04, 0.12),
                    gap_len: (0.1, 0.35),
                    amp: (0.15, 0.3),
                },
                // bass: low fundamentals, second harmonic stays below 500 Hz
                SourceGenParams {
                    freq_lo: 50.0,
                    freq_hi: 160.0,
                    event_len: (0.3, 0.7),
                    gap_len: (0.02, 0.2),
                    amp: (0.15, 0.3),
                },
                // other: sustained mid tones
                SourceGenParams {
                    freq_lo: 250.0,
                    freq_hi: 900.0,
                    event_len: (0.8, 1.8),
                    gap_len: (0.05, 0.3),
                    amp: (0.1, 0.2),
                },
            ]),
        }
    }
}

struct Event {
    start: usize,
    len: usize,
    amp: f64,
    gain_l: f64,
    gain_r: f64,
}

/// Draw event boundaries until the song is covered.
fn draw_events(rng: &mut ChaCha8Rng, p: &SourceGenParams, n: usize, sr: f64) -> Vec<Event> {
    let mut events = Vec::new();
    let mut t = (rng.gen_range(0.0..p.gap_len.1.max(0.01)) * sr) as usize;
    while t < n {
        let len = ((rng.gen_range(p.event_len.0..p.event_len.1) * sr) as usize).max(8);
        let theta = rng.gen_range(0.25..0.75) * std::f64::consts::FRAC_PI_2;
        events.push(Event {
            start: t,
            len: len.min(n - t),
            amp: rng.gen_range(p.amp.0..p.amp.1),
            gain_l: theta.cos(),
            gain_r: theta.sin(),
        });
        t += len + ((rng.gen_range(p.gap_len.0..p.gap_len.1) * sr) as usize).max(1);
    }
    events
}

fn add_event(stem: &mut [Vec<f64>], e: &Event, wave: impl Fn(usize) -> f64) {
    for i in 0..e.len {
        let v = e.amp * wave(i);
        stem[0][e.start + i] += e.gain_l * v;
        stem[1][e.start + i] += e.gain_r * v;
    }
}

fn gen_bass(rng: &mut ChaCha8Rng, p: &SourceGenParams, n: usize, sr: f64) -> Vec<Vec<f64>> {
    let mut stem = vec![vec![0.0; n]; 2];
    for e in draw_events(rng, p, n, sr) {
        let f0 = rng.gen_range(p.freq_lo..p.freq_hi);
        let h2 = rng.gen_range(0.2..0.4);
        let attack = (0.012 * sr) as usize;
        let tau = e.len as f64 / 3.0;
        let w0 = 2.0 * std::f64::consts::PI * f0 / sr;
        add_event(&mut stem, &e, |i| {
            let env = (i as f64 / attack.max(1) as f64).min(1.0) * (-(i as f64) / tau).exp();
            env * ((w0 * i as f64).sin() + h2 * (2.0 * w0 * i as f64).sin())
        });
    }
    stem
}

fn gen_drums(rng: &mut ChaCha8Rng, p: &SourceGenParams, n: usize, sr: f64) -> Vec<Vec<f64>> {
    let mut stem = vec![vec![0.0; n]; 2];
    for e in draw_events(rng, p, n, sr) {
        let tau = e.len as f64 / 4.0;
        let noise: Vec<f64> = (0..e.len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let attack = (0.002 * sr).max(1.0) as usize;
        add_event(&mut stem, &e, |i| {
            let env = (i as f64 / attack as f64).min(1.0) * (-(i as f64) / tau).exp();
            env * noise[i]
        });
    }
    stem
}

fn gen_vocals(rng: &mut ChaCha8Rng, p: &SourceGenParams, n: usize, sr: f64) -> Vec<Vec<f64>> {
    let mut stem = vec![vec![0.0; n]; 2];
    for e in draw_events(rng, p, n, sr) {
        let f_start = rng.gen_range(p.freq_lo..p.freq_hi);
        let f_end = rng.gen_range(p.freq_lo..p.freq_hi);
        let ramp = (0.05 * sr) as usize;
        // Geometric glide; phase accumulated sample by sample.
        let ratio = f_end / f_start;
        let mut phase = 0.0f64;
        let phases: Vec<f64> = (0..e.len)
            .map(|i| {
                let f = f_start * ratio.powf(i as f64 / e.len.max(1) as f64);
                phase += 2.0 * std::f64::consts::PI * f / sr;
                phase
            })
            .collect();
        add_event(&mut stem, &e, |i| {
            let up = (i as f64 / ramp.max(1) as f64).min(1.0);
            let down = ((e.len - 1 - i) as f64 / ramp.max(1) as f64).min(1.0);
            let ph = phases[i];
            up * down * (ph.sin() + 0.5 * (2.0 * ph).sin() + 0.25 * (3.0 * ph).sin())
        });
    }
    stem
}

fn gen_other(rng: &mut ChaCha8Rng, p: &SourceGenParams, n: usize, sr: f64) -> Vec<Vec<f64>> {
    let mut stem = vec![vec![0.0; n]; 2];
    for e in draw_events(rng, p, n, sr) {
        let f0 = rng.gen_range(p.freq_lo..p.freq_hi);
        let fifth = 1.5 * f0;
        let ramp = (0.15 * sr) as usize;
        let (w0, w1) = (
            2.0 * std::f64::consts::PI * f0 / sr,
            2.0 * std::f64::consts::PI * fifth / sr,
        );
        add_event(&mut stem, &e, |i| {
            let up = (i as f64 / ramp.max(1) as f64).min(1.0);
            let down = ((e.len - 1 - i) as f64 / ramp.max(1) as f64).min(1.0);
            up * down * 0.5 * ((w0 * i as f64).sin() + (w1 * i as f64).sin())
        });
    }
    stem
}

/// Round to f32 precision so in-memory stems match their WAV round trip.
fn snap_f32(stem: &mut [Vec<f64>]) {
    for ch in stem {
        for v in ch.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Generate a deterministic corpus; the mixture of every song is the exact
/// sum of its stems.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<Song>> {
    if spec.duration_s < 2.0 {
        return Err(Error::InvalidInput(format!(
            "synthetic songs must be at least 2 s long, got {}",
            spec.duration_s
        )));
    }
    if spec.sample_rate == 0 || spec.n_songs == 0 {
        return Err(Error::InvalidInput(
            "synth spec needs a sample rate and at least one song".into(),
        ));
    }
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_s * sr) as usize;
    let mut songs = Vec::with_capacity(spec.n_songs);
    for idx in 0..spec.n_songs {
        let stems = PerSource::from_fn(|src| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                spec.seed,
                &[idx as u64, src.index() as u64],
            ));
            let p = &spec.sources[src];
            let mut stem = match src {
                SourceId::Vocals => gen_vocals(&mut rng, p, n, sr),
                SourceId::Drums => gen_drums(&mut rng, p, n, sr),
                SourceId::Bass => gen_bass(&mut rng, p, n, sr),
                SourceId::Other => gen_other(&mut rng, p, n, sr),
            };
            snap_f32(&mut stem);
            stem
        });
        let mut mixture = vec![vec![0.0; n]; 2];
        for (_, stem) in stems.iter() {
            for c in 0..2 {
                for i in 0..n {
                    mixture[c][i] += stem[c][i];
                }
            }
        }
        let song = Song {
            song_id: format!("song{idx:02}"),
            sample_rate: spec.sample_rate,
            mixture,
            stems: stems.map(|_, s| Some(s.clone())),
        };
        debug_assert!(song.mixture_residual() == 0.0);
        songs.push(song);
    }
    Ok(songs)
}
