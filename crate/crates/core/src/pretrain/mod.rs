//! Multi-task pretraining: schedule, training step, checkpoints and the run
//! loop with per-step metrics.

mod checkpoint;
mod step;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use step::{train_step, MultiTaskNet, StepContext, StepOutput};

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{build_views, ViewSet};
use crate::config::RunConfig;
use crate::nn::{AdamW, AdamWState, ParamStore};
use crate::radiomics::RadiomicsStats;
use crate::swin::EncoderOutput;
use crate::voldata::{Sample, Volume};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dmtc";
pub const TARGET_STATS_FILE: &str = "target_stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate. 5e-4 is the other commonly quoted setting.
    pub base_lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_epochs: u64,
    pub batch_size: usize,
    /// Caps the schedule length below `total_epochs` worth of steps.
    pub max_steps: Option<u64>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
            total_epochs: 300,
            batch_size: 2,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

impl OptimConfig {
    pub fn toy() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_steps: 50,
            total_epochs: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer rates, betas and eps must be positive with betas below 1".into()));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("batch_size and total_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Full batches per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, num_samples: usize) -> u64 {
        (num_samples / self.batch_size) as u64
    }

    pub fn total_steps(&self, num_samples: usize) -> u64 {
        let full = self.total_epochs * self.steps_per_epoch(num_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine down to 0 at
/// `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, cfg: &OptimConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.base_lr * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(w).max(1);
    let progress = ((step - w) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Corpus statistics used to standardize the tabular targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub morphology: RadiomicsStats,
    pub radiomics: RadiomicsStats,
}

impl TargetStats {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let rows = |f: &dyn Fn(&Sample) -> &[f32]| -> Vec<Vec<f64>> { samples.iter().map(|s| f(s).iter().map(|&v| v as f64).collect()).collect() };
        let m = rows(&|s| &s.morphology.values);
        let r = rows(&|s| &s.radiomics.values);
        Ok(Self {
            morphology: RadiomicsStats::fit(m.iter().map(Vec::as_slice))?,
            radiomics: RadiomicsStats::fit(r.iter().map(Vec::as_slice))?,
        })
    }

    pub fn apply(&self, sample: &mut Sample) {
        let z = |stats: &RadiomicsStats, v: &[f32]| stats.apply(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        sample.morphology.values = z(&self.morphology, &sample.morphology.values);
        sample.radiomics.values = z(&self.radiomics, &sample.radiomics.values);
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_anatomy: f64,
    pub loss_morpho: f64,
    pub loss_radiomics: f64,
    pub loss_rot: f64,
    pub loss_loc: f64,
    pub loss_mim: f64,
    pub loss_contrast: f64,
    pub acc_rot: Option<f64>,
    pub acc_loc: Option<f64>,
}

impl MetricsRecord {
    fn new(step: u64, epoch: u64, lr: f64, out: &StepOutput) -> Self {
        let r = &out.report;
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        Self {
            step,
            epoch,
            lr,
            loss_total: r.total,
            loss_anatomy: r.anatomy,
            loss_morpho: r.morpho,
            loss_radiomics: r.radiomics,
            loss_rot: r.rot,
            loss_loc: r.loc,
            loss_mim: r.mim,
            loss_contrast: r.contrast,
            acc_rot: opt(out.acc_rot),
            acc_loc: opt(out.acc_loc),
        }
    }
}

/// Mutable optimization state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub opt: AdamWState<f32>,
    /// Completed updates.
    pub step: u64,
}

/// Pretraining over an in-memory corpus. All randomness is derived from the
/// run seed plus the step position, so a resumed run replays exactly.
pub struct Trainer {
    pub config: RunConfig,
    pub net: MultiTaskNet,
    pub state: TrainState,
    samples: Vec<Sample>,
    pub stats: Option<TargetStats>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Standardizes the targets (when configured) and initializes parameters.
    pub fn new(config: &RunConfig, mut samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if samples.len() < config.optim.batch_size {
            return Err(Error::invalid(format!("{} samples cannot fill a batch of {}", samples.len(), config.optim.batch_size)));
        }
        let stats = if config.data.standardize_targets {
            let s = TargetStats::fit(&samples)?;
            samples.iter_mut().for_each(|x| s.apply(x));
            Some(s)
        } else {
            None
        };
        let mut params = ParamStore::new();
        let net = MultiTaskNet::new(&config.model, &mut params, &mut crate::rng::derive(config.seed, "init"))?;
        let opt = AdamWState::new(&params);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.runtime.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            config: config.clone(),
            net,
            state: TrainState { params, opt, step: 0 },
            samples,
            stats,
            pool,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: &RunConfig, samples: Vec<Sample>, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, samples)?;
        checkpoint.restore(&mut t.state)?;
        Ok(t)
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.config.optim.total_steps(self.samples.len())
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut crate::rng::derive(self.config.seed, &format!("shuffle/{epoch}")));
        order
    }

    /// View sets for update `step`.
    pub fn batch_for_step(&self, step: u64) -> Result<Vec<ViewSet>> {
        let spe = self.config.optim.steps_per_epoch(self.samples.len());
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let order = self.epoch_order(epoch);
        let bs = self.config.optim.batch_size;
        let picks = &order[pos * bs..(pos + 1) * bs];
        self.pool.install(|| {
            picks
                .par_iter()
                .map(|&i| {
                    let s = &self.samples[i];
                    let mut rng = crate::rng::derive(self.config.seed, &format!("views/{epoch}/{}", s.sample_id));
                    build_views(s, &mut rng, &self.config.augment)
                })
                .collect()
        })
    }

    /// Runs the next update and returns its metrics.
    pub fn next_step(&mut self) -> Result<MetricsRecord> {
        let step = self.state.step;
        let total = self.total_steps();
        if step >= total {
            return Err(Error::invalid(format!("schedule of {total} steps already finished")));
        }
        let batch = self.batch_for_step(step)?;
        let lr = lr_at_step(step, total, &self.config.optim);
        let ctx = StepContext {
            net: &self.net,
            geometry: &self.config.augment,
            losses: &self.config.losses,
            optimizer: self.config.optim.adamw(),
            lr,
            step,
        };
        let state = &mut self.state;
        let out = self.pool.install(|| train_step(&ctx, &mut state.params, &mut state.opt, &batch))?;
        state.step += 1;
        let epoch = step / self.config.optim.steps_per_epoch(self.samples.len());
        Ok(MetricsRecord::new(step, epoch, lr, &out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let spe = self.config.optim.steps_per_epoch(self.samples.len());
        save_checkpoint(path, &self.state, &self.config, self.state.step / spe, self.stats.as_ref())
    }

    /// Encoder forward pass of a single volume with the current parameters.
    pub fn encode(&self, volume: &Volume) -> Result<EncoderOutput<f32>> {
        self.net.encoder.encode(&self.state.params, volume)
    }
}

/// Where a run wrote its artifacts.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last: Option<MetricsRecord>,
}

/// Trains to the end of the schedule, appending one metrics line per step and
/// writing periodic plus final checkpoints into `out_dir`. With `resume`,
/// continues from that checkpoint and appends to the existing metrics file.
pub fn run_pretraining(config: &RunConfig, samples: Vec<Sample>, out_dir: impl AsRef<Path>, resume: Option<&Path>) -> Result<RunSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    config.write_resolved(out_dir)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config, samples, &load_checkpoint(p)?)?,
        None => Trainer::new(config, samples)?,
    };
    if let Some(stats) = &trainer.stats {
        let p = out_dir.join(TARGET_STATS_FILE);
        std::fs::write(&p, serde_json::to_vec_pretty(stats)?).map_err(|e| Error::io(&p, e))?;
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut w = BufWriter::new(file);
    let total = trainer.total_steps();
    log::info!("pretraining {} samples for {total} steps", trainer.num_samples());
    let mut last = None;
    while !trainer.is_done() {
        let rec = trainer.next_step()?;
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        log::debug!("step {} loss {:.5}", rec.step, rec.loss_total);
        let every = config.optim.checkpoint_every;
        if every > 0 && trainer.state.step % every == 0 && !trainer.is_done() {
            w.flush().map_err(|e| Error::io(&metrics_path, e))?;
            trainer.save(out_dir.join(format!("step-{:08}.dmtc", trainer.state.step)))?;
        }
        last = Some(rec);
    }
    w.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(RunSummary {
        metrics: metrics_path,
        final_checkpoint,
        steps: trainer.state.step,
        last,
    })
}

#[cfg(test)]
mod tests;
