//! Training: the interleaved procedure (per-task mini-batches, encoder
//! updated every step), its accumulated-encoder variant (encoder updated
//! once per interleave cycle from summed gradients), simultaneous
//! optimization of all four targets, and the independent-networks baseline.
//! Plus validation, early stopping and run logging.

pub mod augment;
pub mod database;

pub use augment::{augment_stems, AugmentConfig, AugmentParams};
pub use database::{
    canonical_split, make_independent_databases, make_simultaneous_database, plan_batches,
    plan_interleaved, PatchRef, SimData, SimultaneousDatabase, Split, TaskData, TaskDatabase,
};

use crate::data::Song;
use crate::dsp::{NormalizationStats, StftConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_shared_model, build_single_model, export_state, import_state, HeadKind, SharedModel,
    SingleTaskModel, WidthProfile,
};
use crate::source::{PerSource, SourceId};
use crate::tensor::{add, backward, l1_loss, zero_grad, Mode, Optimizer, Tensor};
use crate::util::mix_seed;
use database::{compute_song_specs, InterleavedPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Stereo throughout.
pub const CHANNELS: usize = 2;

/// Model + front-end bundle: width profile, STFT settings, and the patch
/// geometry that together fix the network io shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: WidthProfile,
    pub head: HeadKind,
    pub stft: StftConfig,
    pub patch_frames: usize,
    pub patch_hop: usize,
}

impl ModelConfig {
    pub fn base() -> ModelConfig {
        ModelConfig {
            profile: WidthProfile::base(),
            head: HeadKind::FixedAverage,
            stft: StftConfig::default_full_rate(),
            patch_frames: 128,
            patch_hop: 64,
        }
    }

    pub fn encoder_plus() -> ModelConfig {
        ModelConfig {
            profile: WidthProfile::encoder_plus(),
            ..ModelConfig::base()
        }
    }

    /// Small profile at 8 kHz with a 256-sample window and 32-frame patches.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            profile: WidthProfile::desk(),
            head: HeadKind::FixedAverage,
            stft: StftConfig::new(256, 64, 8000).expect("desk stft is COLA"),
            patch_frames: 32,
            patch_hop: 16,
        }
    }

    pub fn by_profile_name(name: &str) -> Option<ModelConfig> {
        match name {
            "base" => Some(ModelConfig::base()),
            "encoder+" | "encoder_plus" => Some(ModelConfig::encoder_plus()),
            "desk" => Some(ModelConfig::desk()),
            _ => None,
        }
    }

    pub fn io_shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.patch_frames, self.stft.bins())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Independent,
    Simultaneous,
    Interleaved,
    InterleavedAcc,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Independent,
        Regime::Simultaneous,
        Regime::Interleaved,
        Regime::InterleavedAcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Independent => "independent",
            Regime::Simultaneous => "simultaneous",
            Regime::Interleaved => "interleaved",
            Regime::InterleavedAcc => "interleaved-acc",
        }
    }

    pub fn from_name(name: &str) -> Option<Regime> {
        match name {
            "independent" => Some(Regime::Independent),
            "simultaneous" => Some(Regime::Simultaneous),
            "interleaved" => Some(Regime::Interleaved),
            "interleaved-acc" | "interleaved_acc" => Some(Regime::InterleavedAcc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    /// Plain gradient descent; test hook for scheduler algebra.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub optimizer: OptKind,
    /// Draw a fresh task permutation per interleave cycle instead of the
    /// fixed vocals/drums/bass/other order.
    pub shuffle_task_order: bool,
    /// Verify per step that inactive decoders (and, in the accumulated
    /// variant, the encoder inside a cycle) stay bit-identical. Test hook.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Interleaved,
            lr: 2e-4,
            batch_size: 32,
            patience: 30,
            max_epochs: 300,
            seed: 0,
            augment: AugmentConfig::off(),
            optimizer: OptKind::Adam,
            shuffle_task_order: false,
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.patience < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidInput(
                "batch_size, patience and max_epochs must all be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Optimizers for a shared model: one for the encoder, one per decoder,
/// with the parameter handle lists cached.
pub struct SharedOptimizers {
    pub encoder: Optimizer,
    pub decoders: PerSource<Optimizer>,
    enc_params: Vec<Tensor>,
    dec_params: PerSource<Vec<Tensor>>,
}

impl SharedOptimizers {
    pub fn new(model: &SharedModel, kind: OptKind) -> SharedOptimizers {
        let enc_params = model.encoder_params();
        let dec_params = PerSource::from_fn(|s| model.decoder_params(s));
        let mk = |params: &[Tensor]| match kind {
            OptKind::Adam => Optimizer::adam(params),
            OptKind::Sgd => Optimizer::sgd(),
        };
        SharedOptimizers {
            encoder: mk(&enc_params),
            decoders: PerSource::from_fn(|s| mk(&dec_params[s])),
            enc_params,
            dec_params,
        }
    }

    fn step_encoder(&mut self, lr: f64) -> Result<()> {
        self.encoder.step(&self.enc_params, lr)
    }

    fn step_decoder(&mut self, source: SourceId, lr: f64) -> Result<()> {
        self.decoders[source].step(&self.dec_params[source], lr)
    }

    fn zero_encoder(&self) {
        zero_grad(&self.enc_params);
    }

    fn zero_decoder(&self, source: SourceId) {
        zero_grad(&self.dec_params[source]);
    }

    pub fn encoder_updates(&self) -> u64 {
        self.encoder.step_count()
    }

    pub fn decoder_updates(&self, source: SourceId) -> u64 {
        self.decoders[source].step_count()
    }

    fn snapshot_params(&self, source: SourceId) -> Vec<Vec<f64>> {
        self.dec_params[source].iter().map(|t| t.to_vec()).collect()
    }

    fn snapshot_encoder(&self) -> Vec<Vec<f64>> {
        self.enc_params.iter().map(|t| t.to_vec()).collect()
    }

    fn params_equal(params: &[Tensor], snapshot: &[Vec<f64>]) -> bool {
        params
            .iter()
            .zip(snapshot.iter())
            .all(|(t, s)| t.to_vec() == *s)
    }
}

/// Mean per-task training loss of one epoch.
pub struct EpochStats {
    pub loss: PerSource<f64>,
    pub batches_per_task: usize,
}

fn finite_or_abort(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss(loss))
    }
}

/// One interleaved epoch: for every cycle, each task in turn samples its
/// mini-batch and updates both the encoder and its own decoder.
pub fn epoch_interleaved(
    model: &SharedModel,
    dbs: &PerSource<TaskData>,
    cfg: &TrainConfig,
    opts: &mut SharedOptimizers,
    epoch: usize,
) -> Result<EpochStats> {
    let plan = plan_interleaved(
        dbs,
        cfg.batch_size,
        cfg.seed,
        epoch,
        cfg.shuffle_task_order,
    )?;
    let mut sums = PerSource::from_fn(|_| 0.0f64);
    for b in 0..plan.batches_per_task {
        for &src in &plan.order[b] {
            let (x, t) = dbs[src].train.batch(&plan.batches[src][b])?;
            let others: Option<Vec<(SourceId, Vec<Vec<f64>>)>> = cfg.debug_checks.then(|| {
                SourceId::ALL
                    .into_iter()
                    .filter(|&s| s != src)
                    .map(|s| (s, opts.snapshot_params(s)))
                    .collect()
            });
            let est = model.forward_single(&x, src, Mode::Train)?;
            let loss = l1_loss(&est, &t)?;
            sums[src] += finite_or_abort(loss.item())?;
            backward(&loss)?;
            opts.step_encoder(cfg.lr)?;
            opts.step_decoder(src, cfg.lr)?;
            opts.zero_encoder();
            opts.zero_decoder(src);
            if let Some(snaps) = others {
                for (s, snap) in snaps {
                    if !SharedOptimizers::params_equal(&opts.dec_params[s], &snap) {
                        return Err(Error::InvalidInput(format!(
                            "decoder isolation violated: step on {src} changed decoder {s}"
                        )));
                    }
                }
            }
        }
    }
    Ok(EpochStats {
        loss: sums.map(|_, v| v / plan.batches_per_task as f64),
        batches_per_task: plan.batches_per_task,
    })
}

/// Accumulated-encoder variant: within one cycle each task backpropagates
/// into a shared encoder-gradient accumulator and updates its decoder
/// immediately; the encoder is updated once per cycle from the summed
/// gradient.
pub fn epoch_interleaved_acc(
    model: &SharedModel,
    dbs: &PerSource<TaskData>,
    cfg: &TrainConfig,
    opts: &mut SharedOptimizers,
    epoch: usize,
) -> Result<EpochStats> {
    let plan: InterleavedPlan = plan_interleaved(
        dbs,
        cfg.batch_size,
        cfg.seed,
        epoch,
        cfg.shuffle_task_order,
    )?;
    let mut sums = PerSource::from_fn(|_| 0.0f64);
    for b in 0..plan.batches_per_task {
        opts.zero_encoder();
        let enc_snapshot = cfg.debug_checks.then(|| opts.snapshot_encoder());
        for &src in &plan.order[b] {
            let (x, t) = dbs[src].train.batch(&plan.batches[src][b])?;
            let est = model.forward_single(&x, src, Mode::Train)?;
            let loss = l1_loss(&est, &t)?;
            sums[src] += finite_or_abort(loss.item())?;
            // Gradients accumulate additively on the shared encoder across
            // the cycle; the decoder is stepped and cleared right away.
            backward(&loss)?;
            opts.step_decoder(src, cfg.lr)?;
            opts.zero_decoder(src);
            if let Some(snap) = &enc_snapshot {
                if !SharedOptimizers::params_equal(&opts.enc_params, snap) {
                    return Err(Error::InvalidInput(
                        "encoder changed inside an accumulation cycle".into(),
                    ));
                }
            }
        }
        opts.step_encoder(cfg.lr)?;
        opts.zero_encoder();
    }
    Ok(EpochStats {
        loss: sums.map(|_, v| v / plan.batches_per_task as f64),
        batches_per_task: plan.batches_per_task,
    })
}

/// Simultaneous epoch: one encoder pass feeds all four decoders, the four
/// losses are summed, and every parameter group is updated once per batch.
pub fn epoch_simultaneous(
    model: &SharedModel,
    data: &SimData,
    cfg: &TrainConfig,
    opts: &mut SharedOptimizers,
    epoch: usize,
) -> Result<EpochStats> {
    let batches = plan_batches(
        &data.train.pairs,
        cfg.batch_size,
        cfg.seed,
        &[0xE5, epoch as u64],
    );
    if batches.is_empty() {
        return Err(Error::InvalidInput(format!(
            "batch size {} exceeds the joint database",
            cfg.batch_size
        )));
    }
    let mut sums = PerSource::from_fn(|_| 0.0f64);
    for refs in &batches {
        let (x, targets) = data.train.batch(refs)?;
        let ests = model.forward(&x, Mode::Train)?;
        let mut total: Option<Tensor> = None;
        for src in SourceId::ALL {
            let loss = l1_loss(&ests[src], &targets[src])?;
            sums[src] += finite_or_abort(loss.item())?;
            total = Some(match total {
                None => loss,
                Some(t) => add(&t, &loss)?,
            });
        }
        backward(&total.expect("four losses"))?;
        opts.step_encoder(cfg.lr)?;
        for src in SourceId::ALL {
            opts.step_decoder(src, cfg.lr)?;
            opts.zero_decoder(src);
        }
        opts.zero_encoder();
    }
    Ok(EpochStats {
        loss: sums.map(|_, v| v / batches.len() as f64),
        batches_per_task: batches.len(),
    })
}

/// Mean validation loss of one task on a shared model (eval mode, all
/// validation patches, remainder batch included).
pub fn validation_task(
    model: &SharedModel,
    db: &TaskDatabase,
    source: SourceId,
    batch_size: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for refs in db.pairs.chunks(batch_size) {
        let (x, t) = db.batch(refs)?;
        let est = model.forward_single(&x, source, Mode::Eval)?;
        sum += l1_loss(&est, &t)?.item() * refs.len() as f64;
        n += refs.len();
    }
    Ok(sum / n as f64)
}

fn validation_sim(
    model: &SharedModel,
    db: &SimultaneousDatabase,
    batch_size: usize,
) -> Result<PerSource<f64>> {
    let mut sums = PerSource::from_fn(|_| 0.0f64);
    let mut n = 0usize;
    for refs in db.pairs.chunks(batch_size) {
        let (x, targets) = db.batch(refs)?;
        let ests = model.forward(&x, Mode::Eval)?;
        for src in SourceId::ALL {
            sums[src] += l1_loss(&ests[src], &targets[src])?.item() * refs.len() as f64;
        }
        n += refs.len();
    }
    Ok(sums.map(|_, v| v / n as f64))
}

fn validation_single(model: &SingleTaskModel, db: &TaskDatabase, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for refs in db.pairs.chunks(batch_size) {
        let (x, t) = db.batch(refs)?;
        let est = model.forward(&x, Mode::Eval)?;
        sum += l1_loss(&est, &t)?.item() * refs.len() as f64;
        n += refs.len();
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early stopping over a per-epoch criterion history.
///
/// Returns the index of the best (lowest) entry, ties broken toward the
/// earlier epoch, and `Stop` once `patience` consecutive epochs have passed
/// without improvement.
pub fn early_stopping(history: &[f64], patience: usize) -> (usize, StopDecision) {
    assert!(!history.is_empty(), "early_stopping needs >= 1 epoch");
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best] {
            best = i;
        }
    }
    let since_best = history.len() - 1 - best;
    let decision = if since_best >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    (best, decision)
}

/// One CSV-visible log entry per (epoch, task).
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub task: SourceId,
    pub train_loss: f64,
    pub val_loss: f64,
    pub encoder_updates: u64,
    pub decoder_updates: u64,
}

/// Run log: per-epoch losses per task, best-epoch markers (identical for
/// all tasks in shared regimes), and wall-clock timings (not part of the
/// CSV so logs stay byte-comparable across reruns).
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: PerSource<usize>,
    pub wall_ms_per_epoch: Vec<u128>,
    pub stopped_early: bool,
}

pub fn log_to_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,task,train_loss,val_loss,encoder_updates,decoder_updates\n");
    for r in &log.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.task, r.train_loss, r.val_loss, r.encoder_updates, r.decoder_updates
        ));
    }
    out
}

pub enum TrainedModel {
    Shared(SharedModel),
    Independent(PerSource<SingleTaskModel>),
}

pub struct TrainOutcome {
    pub regime: Regime,
    pub log: TrainLog,
    pub model: TrainedModel,
    pub stats: NormalizationStats,
}

enum SharedData {
    Tasks(PerSource<TaskData>),
    Sim(SimData),
}

fn augmented_song(song: &Song, cfg: &TrainConfig, epoch: usize, corpus_idx: usize) -> Option<Song> {
    if song.stems.values().any(|s| s.is_none()) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.seed,
        &[0xA6, epoch as u64, corpus_idx as u64],
    ));
    let stems = PerSource::from_fn(|s| song.stems[s].clone().unwrap());
    let aug = augment_stems(&stems, &cfg.augment, song.sample_rate, &mut rng);
    let mut mixture = vec![vec![0.0; song.len_samples()]; song.channels()];
    for (_, stem) in aug.iter() {
        for c in 0..mixture.len() {
            for (m, v) in mixture[c].iter_mut().zip(stem[c].iter()) {
                *m += v;
            }
        }
    }
    Some(Song {
        song_id: song.song_id.clone(),
        sample_rate: song.sample_rate,
        mixture,
        stems: aug.map(|_, s| Some(s.clone())),
    })
}

fn refresh_augmented(
    corpus: &[Song],
    mc: &ModelConfig,
    stats: &NormalizationStats,
    cfg: &TrainConfig,
    epoch: usize,
    data: &mut SharedData,
) -> Result<()> {
    for (idx, song) in corpus.iter().enumerate() {
        let Some(aug) = augmented_song(song, cfg, epoch, idx) else {
            continue;
        };
        let specs = compute_song_specs(&aug, mc, stats)?;
        match data {
            SharedData::Tasks(dbs) => {
                for (_, d) in dbs.iter_mut() {
                    d.train.refresh_song(idx, &specs);
                }
            }
            SharedData::Sim(d) => d.train.refresh_song(idx, &specs),
        }
    }
    Ok(())
}

/// Train a model under the configured regime until early stopping (or the
/// epoch cap); the returned model carries the best-validation parameters.
pub fn train(corpus: &[Song], mc: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.regime {
        Regime::Independent => train_independent(corpus, mc, cfg),
        Regime::Simultaneous | Regime::Interleaved | Regime::InterleavedAcc => {
            train_shared(corpus, mc, cfg)
        }
    }
}

fn train_shared(corpus: &[Song], mc: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (mut data, stats) = match cfg.regime {
        Regime::Simultaneous => {
            let (d, s) = make_simultaneous_database(corpus, mc, cfg.seed)?;
            (SharedData::Sim(d), s)
        }
        _ => {
            let (d, s) = make_independent_databases(corpus, mc, cfg.seed)?;
            (SharedData::Tasks(d), s)
        }
    };
    let model = build_shared_model(
        &mc.profile,
        mc.io_shape(),
        mc.head,
        mix_seed(cfg.seed, &[0xB0]),
    )?;
    let mut opts = SharedOptimizers::new(&model, cfg.optimizer);

    let mut rows = Vec::new();
    let mut wall = Vec::new();
    let mut history = Vec::new();
    let mut best_snapshot: Option<Vec<(String, Vec<usize>, Vec<f64>)>> = None;
    let mut best_idx = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        if cfg.augment.enabled() {
            refresh_augmented(corpus, mc, &stats, cfg, epoch, &mut data)?;
        }
        let (train_stats, val) = match (&data, cfg.regime) {
            (SharedData::Tasks(dbs), Regime::Interleaved) => {
                let s = epoch_interleaved(&model, dbs, cfg, &mut opts, epoch)?;
                let v = PerSource::try_from_fn(|src| {
                    validation_task(&model, &dbs[src].val, src, cfg.batch_size)
                })?;
                (s, v)
            }
            (SharedData::Tasks(dbs), Regime::InterleavedAcc) => {
                let s = epoch_interleaved_acc(&model, dbs, cfg, &mut opts, epoch)?;
                let v = PerSource::try_from_fn(|src| {
                    validation_task(&model, &dbs[src].val, src, cfg.batch_size)
                })?;
                (s, v)
            }
            (SharedData::Sim(sim), Regime::Simultaneous) => {
                let s = epoch_simultaneous(&model, sim, cfg, &mut opts, epoch)?;
                let v = validation_sim(&model, &sim.val, cfg.batch_size)?;
                (s, v)
            }
            _ => unreachable!("regime/database pairing is fixed above"),
        };
        for src in SourceId::ALL {
            rows.push(LogRow {
                epoch,
                task: src,
                train_loss: train_stats.loss[src],
                val_loss: val[src],
                encoder_updates: opts.encoder_updates(),
                decoder_updates: opts.decoder_updates(src),
            });
        }
        // Validation criterion for shared models: unweighted mean of the
        // per-task validation losses.
        let criterion = val.values().sum::<f64>() / 4.0;
        history.push(criterion);
        let (bi, decision) = early_stopping(&history, cfg.patience);
        if bi == history.len() - 1 {
            best_snapshot = Some(export_state(&model.state_refs()));
        }
        best_idx = bi;
        wall.push(t0.elapsed().as_millis());
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    if let Some(snapshot) = best_snapshot {
        let map = snapshot
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect::<std::collections::HashMap<_, _>>();
        import_state(&model.state_refs(), &map)?;
    }
    Ok(TrainOutcome {
        regime: cfg.regime,
        log: TrainLog {
            rows,
            best_epoch: PerSource::from_fn(|_| best_idx + 1),
            wall_ms_per_epoch: wall,
            stopped_early,
        },
        model: TrainedModel::Shared(model),
        stats,
    })
}

fn train_independent(corpus: &[Song], mc: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (mut dbs, stats) = make_independent_databases(corpus, mc, cfg.seed)?;
    let mut rows: Vec<LogRow> = Vec::new();
    let mut wall_total: Vec<u128> = Vec::new();
    let mut best_epochs = PerSource::from_fn(|_| 1usize);
    let mut stopped_any = false;

    let models = PerSource::try_from_fn(|source| {
        let model = build_single_model(
            &mc.profile,
            mc.io_shape(),
            mc.head,
            source,
            mix_seed(cfg.seed, &[0xB1, source.index() as u64]),
        )?;
        let params = model.params();
        let mut opt = match cfg.optimizer {
            OptKind::Adam => Optimizer::adam(&params),
            OptKind::Sgd => Optimizer::sgd(),
        };
        let mut history = Vec::new();
        let mut best_snapshot: Option<Vec<(String, Vec<usize>, Vec<f64>)>> = None;
        let mut best_idx = 0usize;
        for epoch in 1..=cfg.max_epochs {
            let t0 = Instant::now();
            if cfg.augment.enabled() {
                for (idx, song) in corpus.iter().enumerate() {
                    if let Some(aug) = augmented_song(song, cfg, epoch, idx) {
                        let specs = compute_song_specs(&aug, mc, &stats)?;
                        dbs[source].train.refresh_song(idx, &specs);
                    }
                }
            }
            let batches = plan_batches(
                &dbs[source].train.pairs,
                cfg.batch_size,
                cfg.seed,
                &[0xE9, epoch as u64, source.index() as u64],
            );
            if batches.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "batch size {} exceeds database of source {source}",
                    cfg.batch_size
                )));
            }
            let mut sum = 0.0;
            for refs in &batches {
                let (x, t) = dbs[source].train.batch(refs)?;
                let est = model.forward(&x, Mode::Train)?;
                let loss = l1_loss(&est, &t)?;
                sum += finite_or_abort(loss.item())?;
                backward(&loss)?;
                opt.step(&params, cfg.lr)?;
                zero_grad(&params);
            }
            let val = validation_single(&model, &dbs[source].val, cfg.batch_size)?;
            rows.push(LogRow {
                epoch,
                task: source,
                train_loss: sum / batches.len() as f64,
                val_loss: val,
                encoder_updates: opt.step_count(),
                decoder_updates: opt.step_count(),
            });
            history.push(val);
            let (bi, decision) = early_stopping(&history, cfg.patience);
            if bi == history.len() - 1 {
                best_snapshot = Some(export_state(&model.state_refs()));
            }
            best_idx = bi;
            wall_total.push(t0.elapsed().as_millis());
            if decision == StopDecision::Stop {
                stopped_any = true;
                break;
            }
        }
        if let Some(snapshot) = best_snapshot {
            let map = snapshot
                .into_iter()
                .map(|(n, s, d)| (n, (s, d)))
                .collect::<std::collections::HashMap<_, _>>();
            import_state(&model.state_refs(), &map)?;
        }
        best_epochs[source] = best_idx + 1;
        Ok::<SingleTaskModel, Error>(model)
    })?;

    rows.sort_by_key(|r| (r.epoch, r.task.index()));
    Ok(TrainOutcome {
        regime: Regime::Independent,
        log: TrainLog {
            rows,
            best_epoch: best_epochs,
            wall_ms_per_epoch: wall_total,
            stopped_early: stopped_any,
        },
        model: TrainedModel::Independent(models),
        stats,
    })
}

/// Write the run artifacts: checkpoint(s) and the CSV log. Returns the
/// paths written.
pub fn write_outputs(
    outcome: &TrainOutcome,
    mc: &ModelConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match &outcome.model {
        TrainedModel::Shared(model) => {
            let p = out_dir.join("model.ckpt");
            crate::checkpoint::save_shared(&p, model, &mc.stft, &outcome.stats, &[])?;
            written.push(p);
        }
        TrainedModel::Independent(models) => {
            for (src, model) in models.iter() {
                let p = out_dir.join(format!("model_{src}.ckpt"));
                crate::checkpoint::save_single(&p, model, &mc.stft, &outcome.stats, &[])?;
                written.push(p);
            }
        }
    }
    let log_path = out_dir.join("log.csv");
    std::fs::write(&log_path, log_to_csv(&outcome.log))?;
    written.push(log_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_corpus, SynthSpec};
    use crate::tensor::sgd_step;

    fn tiny_corpus(n: usize) -> Vec<Song> {
        synth_corpus(&SynthSpec {
            n_songs: n,
            duration_s: 2.0,
            sample_rate: 8000,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn tiny_cfg(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            batch_size: 8,
            lr: 1e-3,
            patience: 2,
            max_epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn interleaved_counters_follow_the_cycle_structure() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = tiny_cfg(Regime::Interleaved);
        let (dbs, _) = make_independent_databases(&corpus, &mc, cfg.seed).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 1).unwrap();
        let mut opts = SharedOptimizers::new(&model, OptKind::Adam);
        let stats = epoch_interleaved(&model, &dbs, &cfg, &mut opts, 1).unwrap();
        let b = stats.batches_per_task as u64;
        assert!(b >= 1);
        assert_eq!(opts.encoder_updates(), 4 * b);
        for s in SourceId::ALL {
            assert_eq!(opts.decoder_updates(s), b);
            assert!(stats.loss[s].is_finite());
        }
    }

    #[test]
    fn accumulated_counters_update_encoder_once_per_cycle() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            debug_checks: true,
            ..tiny_cfg(Regime::InterleavedAcc)
        };
        let (dbs, _) = make_independent_databases(&corpus, &mc, cfg.seed).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 1).unwrap();
        let mut opts = SharedOptimizers::new(&model, OptKind::Adam);
        let stats = epoch_interleaved_acc(&model, &dbs, &cfg, &mut opts, 1).unwrap();
        let b = stats.batches_per_task as u64;
        assert_eq!(opts.encoder_updates(), b);
        for s in SourceId::ALL {
            assert_eq!(opts.decoder_updates(s), b);
        }
    }

    #[test]
    fn decoder_isolation_holds_under_debug_checks() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            debug_checks: true,
            ..tiny_cfg(Regime::Interleaved)
        };
        let (dbs, _) = make_independent_databases(&corpus, &mc, cfg.seed).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 1).unwrap();
        let mut opts = SharedOptimizers::new(&model, OptKind::Adam);
        epoch_interleaved(&model, &dbs, &cfg, &mut opts, 1).unwrap();
    }

    #[test]
    fn accumulated_sgd_update_equals_sum_of_task_gradients() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            optimizer: OptKind::Sgd,
            batch_size: 8,
            lr: 0.05,
            seed: 3,
            ..tiny_cfg(Regime::InterleavedAcc)
        };
        let (dbs, _) = make_independent_databases(&corpus, &mc, cfg.seed).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 2).unwrap();

        // Snapshot, then run exactly one accumulation cycle by truncating
        // the plan to its first batch per task.
        let before = export_state(&model.state_refs());
        let plan = plan_interleaved(&dbs, cfg.batch_size, cfg.seed, 1, false).unwrap();
        let batches = PerSource::from_fn(|s| plan.batches[s][0].clone());

        let enc_params = model.encoder_params();
        let mut opts = SharedOptimizers::new(&model, OptKind::Sgd);
        for src in SourceId::ALL {
            let (x, t) = dbs[src].train.batch(&batches[src]).unwrap();
            let est = model.forward_single(&x, src, Mode::Train).unwrap();
            backward(&l1_loss(&est, &t).unwrap()).unwrap();
            opts.step_decoder(src, cfg.lr).unwrap();
            opts.zero_decoder(src);
        }
        let enc_after: Vec<Vec<f64>> = {
            let mut state = crate::tensor::SgdState::new();
            sgd_step(&enc_params, &mut state, cfg.lr).unwrap();
            enc_params.iter().map(|t| t.to_vec()).collect()
        };
        zero_grad(&enc_params);

        // Oracle: restore the snapshot and recompute each task's encoder
        // gradient at the frozen encoder (decoders also restored, matching
        // the state each task saw during the cycle).
        let map = before
            .iter()
            .cloned()
            .map(|(n, s, d)| (n, (s, d)))
            .collect::<std::collections::HashMap<_, _>>();
        import_state(&model.state_refs(), &map).unwrap();
        let mut summed: Vec<Vec<f64>> = enc_params.iter().map(|t| vec![0.0; t.numel()]).collect();
        for src in SourceId::ALL {
            // Each task used the decoder state present when its turn came:
            // earlier tasks' decoder updates never feed later tasks'
            // encoder gradients, so the frozen snapshot is the right state.
            let (x, t) = dbs[src].train.batch(&batches[src]).unwrap();
            let est = model.forward_single(&x, src, Mode::Train).unwrap();
            backward(&l1_loss(&est, &t).unwrap()).unwrap();
            for (acc, p) in summed.iter_mut().zip(enc_params.iter()) {
                for (a, g) in acc.iter_mut().zip(p.grad().unwrap().iter()) {
                    *a += g;
                }
            }
            zero_grad(&enc_params);
            // Restore decoder weights the next task's oracle run expects.
            import_state(&model.state_refs(), &map).unwrap();
        }
        let before_map: std::collections::HashMap<String, Vec<f64>> = before
            .iter()
            .map(|(n, _, d)| (n.clone(), d.clone()))
            .collect();
        let names: Vec<String> = model
            .state_refs()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        // Encoder parameter names precede decoder ones; align by prefix.
        let enc_names: Vec<&String> = names
            .iter()
            .filter(|n| n.starts_with("model.encoder") && !n.contains("running"))
            .collect();
        assert_eq!(enc_names.len(), enc_params.len());
        let mut max_rel = 0.0f64;
        for ((p_after, name), g_sum) in enc_after.iter().zip(enc_names.iter()).zip(summed.iter()) {
            let p_before = &before_map[*name];
            for i in 0..p_after.len() {
                let got = p_before[i] - p_after[i];
                let want = cfg.lr * g_sum[i];
                let rel = (got - want).abs() / want.abs().max(got.abs()).max(1e-12);
                if want.abs() > 1e-15 {
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 1e-6, "max rel {max_rel}");
    }

    #[test]
    fn simultaneous_sum_matches_individual_losses_and_gradients() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let (sim, _) = make_simultaneous_database(&corpus, &mc, 5).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 6).unwrap();
        let refs = &sim.train.pairs[..4];
        let (x, targets) = sim.train.batch(refs).unwrap();

        let ests = model.forward(&x, Mode::Train).unwrap();
        let mut parts = Vec::new();
        let mut total: Option<Tensor> = None;
        for src in SourceId::ALL {
            let l = l1_loss(&ests[src], &targets[src]).unwrap();
            parts.push(l.item());
            total = Some(match total {
                None => l,
                Some(t) => add(&t, &l).unwrap(),
            });
        }
        let total = total.unwrap();
        assert!((total.item() - parts.iter().sum::<f64>()).abs() < 1e-9);

        // Summed-loss encoder gradient equals the sum of per-task encoder
        // gradients evaluated at identical parameters.
        let enc_params = model.encoder_params();
        backward(&total).unwrap();
        let joint: Vec<Vec<f64>> = enc_params.iter().map(|p| p.grad().unwrap()).collect();
        zero_grad(&enc_params);
        for src in SourceId::ALL {
            zero_grad(&model.decoder_params(src));
        }
        let mut summed: Vec<Vec<f64>> = enc_params.iter().map(|p| vec![0.0; p.numel()]).collect();
        for src in SourceId::ALL {
            let est = model.forward_single(&x, src, Mode::Train).unwrap();
            backward(&l1_loss(&est, &targets[src]).unwrap()).unwrap();
            for (acc, p) in summed.iter_mut().zip(enc_params.iter()) {
                for (a, g) in acc.iter_mut().zip(p.grad().unwrap().iter()) {
                    *a += g;
                }
            }
            zero_grad(&enc_params);
        }
        let mut max_rel = 0.0f64;
        for (j, s) in joint.iter().zip(summed.iter()) {
            for (a, b) in j.iter().zip(s.iter()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-6, "max rel {max_rel}");
    }

    #[test]
    fn early_stopping_rules() {
        // Strictly decreasing: never stops, best is the latest.
        let hist: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let (best, d) = early_stopping(&hist, 3);
        assert_eq!(best, 9);
        assert_eq!(d, StopDecision::Continue);

        // Flat for patience+1 epochs: stop, best is the first.
        let flat = vec![1.0; 4];
        let (best, d) = early_stopping(&flat, 3);
        assert_eq!(best, 0);
        assert_eq!(d, StopDecision::Stop);

        // Ties break toward the earlier epoch.
        let (best, _) = early_stopping(&[2.0, 1.0, 1.0], 5);
        assert_eq!(best, 1);
    }

    #[test]
    fn non_finite_loss_aborts_the_epoch() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = tiny_cfg(Regime::Interleaved);
        let (dbs, _) = make_independent_databases(&corpus, &mc, cfg.seed).unwrap();
        let model = build_shared_model(&mc.profile, mc.io_shape(), mc.head, 1).unwrap();
        // Poison one encoder weight.
        let p = &model.encoder_params()[0];
        let mut data = p.to_vec();
        data[0] = f64::NAN;
        p.set_data(&data);
        let mut opts = SharedOptimizers::new(&model, OptKind::Adam);
        assert!(matches!(
            epoch_interleaved(&model, &dbs, &cfg, &mut opts, 1),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn independent_training_keeps_networks_apart() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..tiny_cfg(Regime::Independent)
        };
        let outcome = train(&corpus, &mc, &cfg).unwrap();
        let TrainedModel::Independent(models) = &outcome.model else {
            panic!("expected independent models");
        };
        // Four full networks; each log row has equal encoder/decoder counts.
        for r in &outcome.log.rows {
            assert_eq!(r.encoder_updates, r.decoder_updates);
        }
        let total: usize = models.values().map(|m| m.param_count()).sum();
        let single = models[SourceId::Vocals].param_count();
        assert_eq!(total, 4 * single);
    }

    #[test]
    fn shared_run_is_bit_deterministic() {
        let corpus = tiny_corpus(4);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 5,
            ..tiny_cfg(Regime::Interleaved)
        };
        let a = train(&corpus, &mc, &cfg).unwrap();
        let b = train(&corpus, &mc, &cfg).unwrap();
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        let (TrainedModel::Shared(ma), TrainedModel::Shared(mb)) = (&a.model, &b.model) else {
            panic!("expected shared models");
        };
        let sa = export_state(&ma.state_refs());
        let sb = export_state(&mb.state_refs());
        assert_eq!(sa, sb);
    }

    #[test]
    fn training_reduces_the_loss_on_a_tiny_corpus() {
        let corpus = tiny_corpus(6);
        let mc = ModelConfig::desk();
        let cfg = TrainConfig {
            regime: Regime::Interleaved,
            batch_size: 8,
            lr: 2e-3,
            patience: 10,
            max_epochs: 6,
            seed: 4,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &mc, &cfg).unwrap();
        let first: f64 = outcome.log.rows[..4].iter().map(|r| r.train_loss).sum::<f64>() / 4.0;
        let last: f64 = outcome.log.rows[outcome.log.rows.len() - 4..]
            .iter()
            .map(|r| r.train_loss)
            .sum::<f64>()
            / 4.0;
        assert!(
            last < first,
            "train loss did not move: first {first}, last {last}"
        );
    }
}
