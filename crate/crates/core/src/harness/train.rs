//! The training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{self, CheckpointMeta, EpochRecord};
use super::config::{DatasetSource, TrainConfig};
use super::evaluate::evaluate_model;
use super::optim::{cosine_lr, Adam};
use crate::dataset::{self, Batch, FrameSample, LuminanceProxy, Split, SplitManifest, SynthConfig};
use crate::losses::LossReport;
use crate::metrics::MetricsReport;
use crate::model::{LandmarkModel, Objective};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Loads or generates the train and validation frames of a configuration.
pub fn load_frames(cfg: &TrainConfig, split: Split) -> Result<Vec<FrameSample>> {
    match &cfg.dataset {
        DatasetSource::Synthetic { train, val_count } => {
            let (sc, n) = match split {
                Split::Train => (*train, train.count),
                Split::Val => (SynthConfig { seed: train.seed + 1, count: *val_count, ..*train }, *val_count),
                Split::Test => (SynthConfig { seed: train.seed + 2, count: *val_count, ..*train }, *val_count),
            };
            (0..n).map(|i| dataset::generate_synthetic(&sc, i)).collect()
        }
        DatasetSource::Directory { root } => {
            let manifest = SplitManifest::load(&root.join("manifest.json"))?;
            dataset::load_l3d(root, &manifest, split, &LuminanceProxy::default())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct StepLog<'a> {
    step: usize,
    epoch: usize,
    lr: f64,
    secs: f64,
    #[serde(flatten)]
    loss: &'a LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_step_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub best_val_dsc: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub final_val: Option<MetricsReport>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: LandmarkModel,
    train: Vec<FrameSample>,
    val: Vec<FrameSample>,
    objective: Objective,
    opt: Adam,
    meta: CheckpointMeta,
    log: Option<BufWriter<File>>,
    step: usize,
    first_step_loss: Option<f64>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 of the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Trainer {
    /// Loads the configured data and builds the model.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train = load_frames(cfg, Split::Train)?;
        let val = load_frames(cfg, Split::Val)?;
        Self::with_frames(cfg, train, val)
    }

    pub fn with_frames(cfg: &TrainConfig, train: Vec<FrameSample>, val: Vec<FrameSample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let dtype = DType::F32;
        let store = ParamStore::new(dtype, cfg.seed);
        let model = LandmarkModel::new(&cfg.model()?, &store)?;
        let opt = Adam::new(store.trainable().into_iter().map(|(_, v)| v).collect(), cfg.lr, cfg.weight_decay)?;
        Ok(Self {
            meta: CheckpointMeta::new(cfg, dtype)?,
            objective: cfg.objective(),
            cfg: cfg.clone(),
            store,
            model,
            train,
            val,
            opt,
            log: None,
            step: 0,
            first_step_loss: None,
        })
    }

    /// Appends step records to `out_dir/train_log.jsonl`.
    pub fn open_log(&mut self) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let f = File::create(self.cfg.out_dir.join("train_log.jsonl"))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn train_frames(&self) -> &[FrameSample] {
        &self.train
    }

    pub fn val_frames(&self) -> &[FrameSample] {
        &self.val
    }

    fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimizer step on `frames` at the current learning rate.
    pub fn train_step(&mut self, frames: &[&FrameSample], epoch: usize) -> Result<LossReport> {
        let start = Instant::now();
        let batch = Batch::new(frames, self.model.resolution(), self.store.dtype())?;
        let out = self.model.forward(&batch.rgb, &batch.depth)?;
        let step = self.step + 1;
        let (loss, report) = self.model.objective(&out, &batch.masks, &batch.present, &self.objective).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
            e => e,
        })?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step = step;
        self.first_step_loss.get_or_insert(report.total);
        if let Some(log) = &mut self.log {
            let line = StepLog { step, epoch, lr: self.opt.lr, secs: start.elapsed().as_secs_f64(), loss: &report };
            writeln!(log, "{}", serde_json::to_string(&line)?)?;
            log.flush()?;
        }
        log::debug!("step {step} loss {:.5} ({:.2}s)", report.total, start.elapsed().as_secs_f64());
        Ok(report)
    }

    /// Frame order for an epoch: a seeded permutation.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64 + 1)));
        order
    }

    /// Runs one epoch (or what remains of `max_steps`); returns the mean total loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        self.opt.lr = cosine_lr(self.cfg.lr, self.cfg.lr_floor, epoch, self.cfg.epochs);
        let order = self.epoch_order(epoch);
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.done() {
                break;
            }
            let frames: Vec<FrameSample> = if self.cfg.augment {
                chunk
                    .iter()
                    .map(|&i| dataset::augment(&self.train[i], mix(mix(self.cfg.seed, epoch as u64), i as u64)))
                    .collect()
            } else {
                chunk.iter().map(|&i| self.train[i].clone()).collect()
            };
            let refs: Vec<&FrameSample> = frames.iter().collect();
            total += self.train_step(&refs, epoch)?.total;
            n += 1;
        }
        Ok(if n == 0 { f64::NAN } else { total / n as f64 })
    }

    pub fn validate(&self) -> Result<Option<MetricsReport>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate_model(&self.model, &self.val, self.cfg.batch_size, 0.5)?))
    }

    /// Full schedule with per-epoch validation and `last`/`best` checkpoints.
    pub fn fit(mut self) -> Result<TrainSummary> {
        if self.log.is_none() {
            self.open_log()?;
        }
        let last = self.cfg.out_dir.join("last");
        let best = self.cfg.out_dir.join("best");
        let mut best_saved = None;
        let mut final_val = None;
        for epoch in 0..self.cfg.epochs {
            let train_loss = self.run_epoch(epoch)?;
            let stop = self.done();
            let is_last = epoch + 1 == self.cfg.epochs || stop;
            let val = if (epoch + 1) % self.cfg.eval_every == 0 || is_last { self.validate()? } else { None };
            if let Some(v) = &val {
                log::info!("epoch {epoch}: loss {train_loss:.4}, val DSC {:.2}", v.mean_dsc);
            } else {
                log::info!("epoch {epoch}: loss {train_loss:.4}");
            }
            let record = EpochRecord { epoch, lr: self.opt.lr, train_loss, val: val.clone() };
            if let Some(log) = &mut self.log {
                writeln!(log, "{}", serde_json::to_string(&serde_json::json!({ "epoch_summary": &record }))?)?;
                log.flush()?;
            }
            self.meta.history.push(record);
            self.meta.epoch = epoch;
            self.meta.step = self.step;
            if let Some(v) = &val {
                if self.meta.best_val_dsc.is_none_or(|b| v.mean_dsc > b) {
                    self.meta.best_val_dsc = Some(v.mean_dsc);
                    checkpoint::save(&best, &self.store, &self.meta)?;
                    best_saved = Some(best.clone());
                }
            }
            checkpoint::save(&last, &self.store, &self.meta)?;
            if val.is_some() {
                final_val = val;
            }
            if stop {
                break;
            }
        }
        Ok(TrainSummary {
            steps: self.step,
            first_step_loss: self.first_step_loss,
            history: self.meta.history.clone(),
            best_val_dsc: self.meta.best_val_dsc,
            last_checkpoint: last,
            best_checkpoint: best_saved,
            final_val,
        })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        checkpoint::save(dir, &self.store, &self.meta)
    }
}

/// Trains `cfg` end to end.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    Trainer::new(cfg)?.fit()
}
