//! Patch databases built from a corpus: per-source task databases with
//! independent splits and shuffles for interleaved/independent training,
//! and a joint database for simultaneous training.
//!
//! Databases store normalized magnitude pools per song (f32, shared by
//! reference) and reference patches as (song, start-frame) pairs; batches
//! are materialized on demand.

use super::{ModelConfig, CHANNELS};
use crate::data::Song;
use crate::dsp::{fit_normalization, magnitude, normalize, patch_starts, stft, NormalizationStats};
use crate::error::{Error, Result};
use crate::source::{PerSource, SourceId};
use crate::tensor::Tensor;
use crate::util::mix_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Normalized magnitudes of one signal, stored compactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecPool {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    data: Vec<f32>,
}

impl SpecPool {
    fn from_magnitude(m: &crate::dsp::MagnitudeSpectrogram) -> SpecPool {
        SpecPool {
            channels: m.channels(),
            frames: m.frames(),
            bins: m.bins(),
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Copy `frames` frames starting at `frame0` into a (C, frames, bins)
    /// destination slice.
    fn gather(&self, frame0: usize, frames: usize, dst: &mut [f64]) {
        let span = frames * self.bins;
        for c in 0..self.channels {
            let src = &self.data[(c * self.frames + frame0) * self.bins..][..span];
            let out = &mut dst[c * span..(c + 1) * span];
            for (o, &v) in out.iter_mut().zip(src.iter()) {
                *o = v as f64;
            }
        }
    }
}

/// Reference to one training patch inside a database.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub song: u32,
    pub frame: u32,
}

#[derive(Debug, Clone)]
pub struct TaskSong {
    pub corpus_idx: usize,
    pub song_id: String,
    pub mixture: Rc<SpecPool>,
    pub target: Rc<SpecPool>,
}

/// Ordered (mixture patch, single-target patch) collection for one source.
pub struct TaskDatabase {
    pub source: SourceId,
    pub split: Split,
    pub seed: u64,
    pub patch_frames: usize,
    pub songs: Vec<TaskSong>,
    pub pairs: Vec<PatchRef>,
}

impl TaskDatabase {
    /// Materialize (mixture, target) batch tensors of shape (N, C, L, K).
    pub fn batch(&self, refs: &[PatchRef]) -> Result<(Tensor, Tensor)> {
        if refs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let first = &self.songs[refs[0].song as usize].mixture;
        let (c, k, l) = (first.channels, first.bins, self.patch_frames);
        let sample = c * l * k;
        let mut x = vec![0.0; refs.len() * sample];
        let mut t = vec![0.0; refs.len() * sample];
        for (i, r) in refs.iter().enumerate() {
            let song = &self.songs[r.song as usize];
            song.mixture
                .gather(r.frame as usize, l, &mut x[i * sample..(i + 1) * sample]);
            song.target
                .gather(r.frame as usize, l, &mut t[i * sample..(i + 1) * sample]);
        }
        Ok((
            Tensor::from_vec(&[refs.len(), c, l, k], x)?,
            Tensor::from_vec(&[refs.len(), c, l, k], t)?,
        ))
    }

    pub(crate) fn refresh_song(&mut self, corpus_idx: usize, specs: &SongSpecs) {
        for song in &mut self.songs {
            if song.corpus_idx == corpus_idx {
                song.mixture = specs.mixture.clone();
                if let Some(t) = &specs.stems[self.source] {
                    song.target = t.clone();
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimSong {
    pub corpus_idx: usize,
    pub song_id: String,
    pub mixture: Rc<SpecPool>,
    pub targets: PerSource<Rc<SpecPool>>,
}

/// Joint database: every entry carries the mixture and all four targets.
pub struct SimultaneousDatabase {
    pub split: Split,
    pub seed: u64,
    pub patch_frames: usize,
    pub songs: Vec<SimSong>,
    pub pairs: Vec<PatchRef>,
}

impl SimultaneousDatabase {
    pub fn batch(&self, refs: &[PatchRef]) -> Result<(Tensor, PerSource<Tensor>)> {
        if refs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let first = &self.songs[refs[0].song as usize].mixture;
        let (c, k, l) = (first.channels, first.bins, self.patch_frames);
        let sample = c * l * k;
        let mut x = vec![0.0; refs.len() * sample];
        let mut t: PerSource<Vec<f64>> = PerSource::from_fn(|_| vec![0.0; refs.len() * sample]);
        for (i, r) in refs.iter().enumerate() {
            let song = &self.songs[r.song as usize];
            song.mixture
                .gather(r.frame as usize, l, &mut x[i * sample..(i + 1) * sample]);
            for (s, buf) in t.iter_mut() {
                song.targets[s].gather(r.frame as usize, l, &mut buf[i * sample..(i + 1) * sample]);
            }
        }
        let shape = [refs.len(), c, l, k];
        Ok((
            Tensor::from_vec(&shape, x)?,
            PerSource::try_from_fn(|s| Tensor::from_vec(&shape, t[s].clone()))?,
        ))
    }

    pub(crate) fn refresh_song(&mut self, corpus_idx: usize, specs: &SongSpecs) {
        for song in &mut self.songs {
            if song.corpus_idx == corpus_idx {
                song.mixture = specs.mixture.clone();
                song.targets = PerSource::from_fn(|s| {
                    specs.stems[s]
                        .clone()
                        .expect("refresh requires all stems")
                });
            }
        }
    }
}

/// Train/validation pair of databases for one source.
pub struct TaskData {
    pub train: TaskDatabase,
    pub val: TaskDatabase,
}

/// Train/validation pair of joint databases.
pub struct SimData {
    pub train: SimultaneousDatabase,
    pub val: SimultaneousDatabase,
}

/// Normalized pools of one song, shared between databases.
pub(crate) struct SongSpecs {
    pub mixture: Rc<SpecPool>,
    pub stems: PerSource<Option<Rc<SpecPool>>>,
}

fn validate_corpus(corpus: &[Song], mc: &ModelConfig) -> Result<()> {
    if corpus.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "training needs at least 2 songs, got {}",
            corpus.len()
        )));
    }
    for song in corpus {
        if song.channels() != CHANNELS {
            return Err(Error::ChannelCount {
                expected: CHANNELS,
                got: song.channels(),
            });
        }
        if song.sample_rate != mc.stft.sample_rate {
            return Err(Error::InvalidInput(format!(
                "song '{}' has sample rate {}, front-end expects {}",
                song.song_id, song.sample_rate, mc.stft.sample_rate
            )));
        }
    }
    Ok(())
}

/// 75/15-style split: one sixth of the songs (at least one) validate, the
/// rest train.
fn split_songs(indices: &mut Vec<usize>, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    indices.shuffle(rng);
    let n = indices.len();
    let n_val = (n / 6).clamp(1, n - 1);
    let val = indices[n - n_val..].to_vec();
    let mut train = indices[..n - n_val].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// The canonical train/validation song split implied by a seed; also used
/// to fit the normalization statistics.
pub fn canonical_split(n_songs: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_songs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xCA]));
    split_songs(&mut idx, &mut rng)
}

/// Per-bin statistics over the canonical training split's mixtures.
pub fn fit_corpus_normalization(
    corpus: &[Song],
    mc: &ModelConfig,
    seed: u64,
) -> Result<NormalizationStats> {
    let (train_idx, _) = canonical_split(corpus.len(), seed);
    let mags: Vec<_> = train_idx
        .iter()
        .map(|&i| Ok(magnitude(&stft(&corpus[i].mixture, &mc.stft)?)))
        .collect::<Result<Vec<_>>>()?;
    fit_normalization(mags.iter())
}

pub(crate) fn compute_song_specs(
    song: &Song,
    mc: &ModelConfig,
    stats: &NormalizationStats,
) -> Result<SongSpecs> {
    let pool = |signal: &[Vec<f64>]| -> Result<Rc<SpecPool>> {
        let mag = magnitude(&stft(signal, &mc.stft)?);
        Ok(Rc::new(SpecPool::from_magnitude(&normalize(&mag, stats)?)))
    };
    Ok(SongSpecs {
        mixture: pool(&song.mixture)?,
        stems: PerSource::try_from_fn(|s| -> Result<Option<Rc<SpecPool>>> {
            match &song.stems[s] {
                Some(stem) => Ok(Some(pool(stem)?)),
                None => Ok(None),
            }
        })?,
    })
}

fn enumerate_pairs(songs: &[TaskSong], patch_frames: usize, hop: usize) -> Vec<PatchRef> {
    let mut pairs = Vec::new();
    for (i, song) in songs.iter().enumerate() {
        for start in patch_starts(song.mixture.frames, patch_frames, hop) {
            pairs.push(PatchRef {
                song: i as u32,
                frame: start as u32,
            });
        }
    }
    pairs
}

/// Build the four independent per-source databases.
///
/// Each source gets its own seed, its own train/validation song split over
/// the songs that carry its stem, and an independently shuffled pair order.
pub fn make_independent_databases(
    corpus: &[Song],
    mc: &ModelConfig,
    seed: u64,
) -> Result<(PerSource<TaskData>, NormalizationStats)> {
    validate_corpus(corpus, mc)?;
    let stats = fit_corpus_normalization(corpus, mc, seed)?;
    let specs: Vec<SongSpecs> = corpus
        .iter()
        .map(|s| compute_song_specs(s, mc, &stats))
        .collect::<Result<Vec<_>>>()?;

    let data = PerSource::try_from_fn(|source| {
        let mut available: Vec<usize> = (0..corpus.len())
            .filter(|&i| specs[i].stems[source].is_some())
            .collect();
        if available.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "source {source} appears in fewer than 2 songs"
            )));
        }
        let task_seed = mix_seed(seed, &[1 + source.index() as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        let (train_idx, val_idx) = split_songs(&mut available, &mut rng);
        let build = |idx: &[usize], split: Split, rng: Option<&mut ChaCha8Rng>| {
            let songs: Vec<TaskSong> = idx
                .iter()
                .map(|&i| TaskSong {
                    corpus_idx: i,
                    song_id: corpus[i].song_id.clone(),
                    mixture: specs[i].mixture.clone(),
                    target: specs[i].stems[source].clone().unwrap(),
                })
                .collect();
            let mut pairs = enumerate_pairs(&songs, mc.patch_frames, mc.patch_hop);
            if let Some(rng) = rng {
                pairs.shuffle(rng);
            }
            TaskDatabase {
                source,
                split,
                seed: task_seed,
                patch_frames: mc.patch_frames,
                songs,
                pairs,
            }
        };
        let train = build(&train_idx, Split::Train, Some(&mut rng));
        let val = build(&val_idx, Split::Validation, None);
        if train.pairs.is_empty() || val.pairs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "source {source}: songs are too short for {}-frame patches",
                mc.patch_frames
            )));
        }
        Ok(TaskData { train, val })
    })?;
    Ok((data, stats))
}

/// Build the joint database; songs missing any stem are dropped.
pub fn make_simultaneous_database(
    corpus: &[Song],
    mc: &ModelConfig,
    seed: u64,
) -> Result<(SimData, NormalizationStats)> {
    validate_corpus(corpus, mc)?;
    let stats = fit_corpus_normalization(corpus, mc, seed)?;
    let complete: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].stems.values().all(|s| s.is_some()))
        .collect();
    if complete.len() < 2 {
        return Err(Error::InvalidInput(
            "simultaneous training needs at least 2 songs with all four stems".into(),
        ));
    }
    let (canon_train, canon_val) = canonical_split(corpus.len(), seed);
    let train_idx: Vec<usize> = canon_train
        .iter()
        .copied()
        .filter(|i| complete.contains(i))
        .collect();
    let val_idx: Vec<usize> = canon_val
        .iter()
        .copied()
        .filter(|i| complete.contains(i))
        .collect();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidInput(
            "simultaneous split has an empty side after dropping incomplete songs".into(),
        ));
    }
    let specs: std::collections::HashMap<usize, SongSpecs> = complete
        .iter()
        .map(|&i| Ok((i, compute_song_specs(&corpus[i], mc, &stats)?)))
        .collect::<Result<_>>()?;

    let db_seed = mix_seed(seed, &[0x51]);
    let mut rng = ChaCha8Rng::seed_from_u64(db_seed);
    let build = |idx: &[usize], split: Split, rng: Option<&mut ChaCha8Rng>| {
        let songs: Vec<SimSong> = idx
            .iter()
            .map(|&i| SimSong {
                corpus_idx: i,
                song_id: corpus[i].song_id.clone(),
                mixture: specs[&i].mixture.clone(),
                targets: PerSource::from_fn(|s| specs[&i].stems[s].clone().unwrap()),
            })
            .collect();
        let mut pairs = Vec::new();
        for (si, song) in songs.iter().enumerate() {
            for start in patch_starts(song.mixture.frames, mc.patch_frames, mc.patch_hop) {
                pairs.push(PatchRef {
                    song: si as u32,
                    frame: start as u32,
                });
            }
        }
        if let Some(rng) = rng {
            pairs.shuffle(rng);
        }
        SimultaneousDatabase {
            split,
            seed: db_seed,
            patch_frames: mc.patch_frames,
            songs,
            pairs,
        }
    };
    let train = build(&train_idx, Split::Train, Some(&mut rng));
    let val = build(&val_idx, Split::Validation, None);
    if train.pairs.is_empty() || val.pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "songs are too short for {}-frame patches",
            mc.patch_frames
        )));
    }
    Ok((SimData { train, val }, stats))
}

/// Shuffle and chunk one pair list into full batches (remainder dropped).
pub fn plan_batches(
    pairs: &[PatchRef],
    batch_size: usize,
    seed: u64,
    salts: &[u64],
) -> Vec<Vec<PatchRef>> {
    let mut shuffled = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salts));
    shuffled.shuffle(&mut rng);
    shuffled
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// One epoch's interleaving plan: every task contributes exactly
/// `batches_per_task` batches, resampled from its (possibly larger)
/// database each epoch.
pub struct InterleavedPlan {
    pub batches_per_task: usize,
    pub order: Vec<[SourceId; 4]>,
    pub batches: PerSource<Vec<Vec<PatchRef>>>,
}

pub fn plan_interleaved(
    dbs: &PerSource<TaskData>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle_task_order: bool,
) -> Result<InterleavedPlan> {
    let b = dbs
        .values()
        .map(|d| d.train.pairs.len() / batch_size)
        .min()
        .unwrap_or(0);
    if b == 0 {
        return Err(Error::InvalidInput(format!(
            "batch size {batch_size} exceeds the smallest task database"
        )));
    }
    let batches = PerSource::from_fn(|s| {
        let mut all = plan_batches(
            &dbs[s].train.pairs,
            batch_size,
            seed,
            &[0xE0, epoch as u64, s.index() as u64],
        );
        all.truncate(b);
        all
    });
    let order: Vec<[SourceId; 4]> = (0..b)
        .map(|i| {
            let mut cycle = SourceId::ALL;
            if shuffle_task_order {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xF2, epoch as u64, i as u64]));
                cycle.shuffle(&mut rng);
            }
            cycle
        })
        .collect();
    Ok(InterleavedPlan {
        batches_per_task: b,
        order,
        batches,
    })
}
