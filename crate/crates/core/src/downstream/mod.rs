//! Fine-tuning and evaluation: a linear head on the pooled encoder output,
//! k-fold cross-validation, and label-fraction sweeps comparing a pretrained
//! encoder with one trained from scratch.

mod folds;
mod metrics;

pub use folds::{kfold_split, FoldPlan};
pub use metrics::{fold_metrics, auc, compute_metrics, macro_ovr_auc, regression_metrics, MetricSet, Task};

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::nn::{AdamWState, Grads, Init, Linear, ParamStore};
use crate::pretrain::{lr_at_step, Checkpoint, OptimConfig};
use crate::swin::{SwinConfig, SwinEncoder};
use crate::voldata::{crop, resize_trilinear, Sample, Volume};
use crate::{Error, Result};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub lr: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub folds: usize,
    pub fractions: Vec<f64>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 2,
            folds: 5,
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl DownstreamConfig {
    pub fn toy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.folds < 2 {
            return Err(Error::Config("downstream lr, batch_size and folds must be positive (folds >= 2)".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fine-tuning input: the foreground bounding box resized to `size`^3.
pub fn downstream_input(sample: &Sample, size: usize) -> Result<Volume> {
    let (lo, extent) = sample
        .parcellation
        .support_bbox()
        .ok_or_else(|| Error::invalid(format!("sample {} has no foreground", sample.sample_id)))?;
    resize_trilinear(&crop(&sample.volume, lo, extent)?, [size; 3])
}

/// A labelled fine-tuning example.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: Volume,
    pub label: f64,
}

/// Pairs samples with their labels, building inputs at the global view size.
pub fn examples(samples: &[Sample], labels: &[f64], cfg: &RunConfig) -> Result<Vec<Example>> {
    if samples.len() != labels.len() {
        return Err(Error::invalid("one label per sample required"));
    }
    samples
        .iter()
        .zip(labels)
        .map(|(s, &label)| {
            Ok(Example {
                id: s.sample_id.clone(),
                input: downstream_input(s, cfg.augment.global_size)?,
                label,
            })
        })
        .collect()
}

fn check_labels(data: &[Example], task: Task) -> Result<()> {
    for e in data {
        if !e.label.is_finite() {
            return Err(Error::invalid(format!("sample {} has a non-finite label", e.id)));
        }
        if let Task::Classify { .. } = task {
            task.class_of(e.label)?;
        }
    }
    Ok(())
}

struct Model {
    encoder: SwinEncoder,
    head: Linear,
    params: ParamStore<f32>,
}

impl Model {
    fn new(encoder_cfg: &SwinConfig, task: Task, init: Option<&Checkpoint>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = crate::rng::derive(seed, "init");
        let encoder = SwinEncoder::new(encoder_cfg, &mut params, &mut rng)?;
        let head = Linear::new(&mut params, "downstream.head", encoder_cfg.bottleneck_dim(), task.outputs(), true, Init::TruncNormal(0.02), &mut rng);
        if let Some(ck) = init {
            let expected = params.entries().iter().filter(|e| e.name.starts_with("encoder.")).count();
            let loaded = ck.load_params(&mut params);
            if loaded != expected {
                return Err(Error::Config(format!("checkpoint supplies {loaded} of {expected} encoder tensors")));
            }
        }
        Ok(Self { encoder, head, params })
    }

    fn logits(&self, input: &Volume) -> Result<Vec<f32>> {
        let out = self.encoder.encode(&self.params, input)?;
        Ok(self.head.forward(&self.params, &out.z, 1))
    }

    /// Loss gradient of one example, scaled by `scale`.
    fn grads(&self, input: &Volume, target: f64, task: Task, scale: f64) -> Result<(f64, Grads<f32>)> {
        let mut g = Grads::new(&self.params);
        let (out, cache) = self.encoder.forward(&self.params, input.data(), input.shape())?;
        let y = self.head.forward(&self.params, &out.z, 1);
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let (loss, dy) = match task {
            Task::Classify { .. } => crate::losses::cross_entropy(&y64, target as usize)?,
            Task::Regress => {
                let d = y64[0] - target;
                (d * d, vec![2.0 * d])
            }
        };
        let dy: Vec<f32> = dy.iter().map(|&v| (v * scale) as f32).collect();
        let dz = self.head.backward(&self.params, &out.z, &dy, 1, &mut g, true);
        self.encoder.backward(&self.params, &cache, &out, &[], Some(&dz), &mut g);
        Ok((loss, g))
    }
}

fn softmax(v: &[f32]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = v.iter().map(|&x| (x as f64 - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Encoder configuration for fine-tuning: the checkpoint's when given.
fn encoder_config(init: Option<&Checkpoint>, cfg: &RunConfig) -> SwinConfig {
    init.map_or_else(|| cfg.model.encoder.clone(), |c| c.manifest.config.model.encoder.clone())
}

/// Fine-tunes a fresh head (and the whole encoder) on `train`, then scores
/// `test`. `init = None` is the scratch arm. `seed` fixes the head
/// initialization and the batch order.
pub fn finetune_run(init: Option<&Checkpoint>, train: &[Example], test: &[Example], task: Task, cfg: &RunConfig, seed: u64) -> Result<(MetricSet, Vec<Vec<f64>>)> {
    check_labels(train, task)?;
    check_labels(test, task)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let dc = &cfg.downstream;
    let mut model = Model::new(&encoder_config(init, cfg), task, init, seed)?;
    let (shift, scale) = match task {
        Task::Regress => {
            let n = train.len() as f64;
            let m = train.iter().map(|e| e.label).sum::<f64>() / n;
            let sd = (train.iter().map(|e| (e.label - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        }
        Task::Classify { .. } => (0.0, 1.0),
    };
    let target = |e: &Example| (e.label - shift) / scale;
    let optim = OptimConfig {
        base_lr: dc.lr,
        warmup_steps: 0,
        ..cfg.optim.clone()
    };
    let adamw = optim.adamw();
    let mut opt = AdamWState::new(&model.params);
    let steps_per_epoch = train.len().div_ceil(dc.batch_size) as u64;
    let total = dc.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..dc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut crate::rng::derive(seed, &format!("epoch/{epoch}")));
        for batch in order.chunks(dc.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let m = &model;
            let parts: Vec<(f64, Grads<f32>)> = batch
                .par_iter()
                .map(|&i| m.grads(&train[i].input, target(&train[i]), task, w))
                .collect::<Result<_>>()?;
            let mut total_g = Grads::new(&model.params);
            for (loss, g) in &parts {
                if !loss.is_finite() {
                    return Err(Error::NonFinite { task: "downstream", step });
                }
                total_g.add(g);
            }
            adamw.step(&mut model.params, &total_g, &mut opt, lr_at_step(step, total, &optim));
            step += 1;
        }
    }
    let outputs: Vec<Vec<f64>> = test
        .par_iter()
        .map(|e| {
            let y = model.logits(&e.input)?;
            Ok(match task {
                Task::Classify { .. } => softmax(&y),
                Task::Regress => vec![y[0] as f64 * scale + shift],
            })
        })
        .collect::<Result<_>>()?;
    let labels: Vec<f64> = test.iter().map(|e| e.label).collect();
    let metrics = if test.len() >= 2 {
        compute_metrics(&outputs, &labels, task)?
    } else {
        MetricSet::default()
    };
    Ok((metrics, outputs))
}

fn plan_for(data: &[Example], task: Task, cfg: &RunConfig) -> Result<FoldPlan> {
    let ids: Vec<String> = data.iter().map(|e| e.id.clone()).collect();
    let classes = match task {
        Task::Classify { .. } => Some(data.iter().map(|e| task.class_of(e.label)).collect::<Result<Vec<_>>>()?),
        Task::Regress => None,
    };
    kfold_split(&ids, classes.as_deref(), cfg.downstream.folds, cfg.seed)
}

fn pick(data: &[Example], idx: &[usize]) -> Vec<Example> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Out-of-fold model output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub fold: usize,
    pub label: f64,
    /// Class probabilities, or the single regression prediction.
    pub output: Vec<f64>,
}

/// Cross-validated metrics of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub plan: FoldPlan,
    pub folds: Vec<MetricSet>,
    pub mean: MetricSet,
    pub predictions: Vec<Prediction>,
}

/// Seed of the fine-tuning run for `fold`; shared by every fraction and arm.
fn fold_seed(cfg: &RunConfig, fold: usize) -> u64 {
    crate::rng::derive_seed(cfg.seed, &format!("finetune/{fold}"))
}

pub fn cross_validate(init: Option<&Checkpoint>, data: &[Example], task: Task, cfg: &RunConfig) -> Result<CvReport> {
    check_labels(data, task)?;
    let plan = plan_for(data, task, cfg)?;
    let mut folds = Vec::with_capacity(plan.k);
    let mut predictions = Vec::with_capacity(data.len());
    for f in 0..plan.k {
        let test = plan.test_indices(f);
        let (m, outputs) = finetune_run(init, &pick(data, &plan.train_indices(f)), &pick(data, &test), task, cfg, fold_seed(cfg, f))?;
        log::info!("fold {f}: {m:?}");
        folds.push(m);
        for (&i, output) in test.iter().zip(outputs) {
            predictions.push(Prediction {
                id: data[i].id.clone(),
                fold: f,
                label: data[i].label,
                output,
            });
        }
    }
    let mean = MetricSet::mean(&folds);
    Ok(CvReport { plan, folds, mean, predictions })
}

/// Seeded, class-stratified subset keeping `ceil(fraction * n_c)` of each
/// class, in original order. `None` when a class would keep fewer than two.
pub fn subsample(data: &[Example], idx: &[usize], fraction: f64, task: Task, seed: u64) -> Result<Option<Vec<usize>>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for &i in idx {
        let key = match task {
            Task::Classify { .. } => task.class_of(data[i].label)?,
            Task::Regress => 0,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = crate::rng::derive(seed, &format!("subsample/{fraction}"));
    let mut keep = Vec::new();
    for members in groups.values_mut() {
        let n = ((fraction * members.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        if n < 2 {
            return Ok(None);
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n.min(members.len())]);
    }
    keep.sort_unstable();
    Ok(Some(keep))
}

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub arm: String,
    pub fraction: f64,
    pub fold: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryEntry {
    pub arm: String,
    pub fraction: f64,
    pub folds: usize,
    pub mean: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryEntry>,
    pub skipped_fractions: Vec<f64>,
}

pub const ARMS: [&str; 2] = ["pretrained", "scratch"];

/// For every configured fraction and fold, fine-tunes both arms on the
/// subsampled training split and evaluates on the held-out fold.
pub fn label_fraction_sweep(checkpoint: &Checkpoint, data: &[Example], task: Task, cfg: &RunConfig) -> Result<SweepResult> {
    check_labels(data, task)?;
    let plan = plan_for(data, task, cfg)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut skipped = Vec::new();
    'fractions: for &fraction in &cfg.downstream.fractions {
        let mut subsets = Vec::with_capacity(plan.k);
        for f in 0..plan.k {
            match subsample(data, &plan.train_indices(f), fraction, task, crate::rng::derive_seed(cfg.seed, &format!("fold/{f}")))? {
                Some(s) => subsets.push(s),
                None => {
                    log::warn!("fraction {fraction} leaves fewer than two samples per class in fold {f}; skipped");
                    skipped.push(fraction);
                    continue 'fractions;
                }
            }
        }
        for (arm, init) in ARMS.iter().zip([Some(checkpoint), None]) {
            let mut sets = Vec::with_capacity(plan.k);
            for (f, subset) in subsets.iter().enumerate() {
                let (m, _) = finetune_arm(init, checkpoint, &pick(data, subset), &pick(data, &plan.test_indices(f)), task, cfg, fold_seed(cfg, f))?;
                rows.push(SweepRow {
                    task: task.name().into(),
                    arm: arm.to_string(),
                    fraction,
                    fold: f,
                    acc: m.acc,
                    auc: m.auc,
                    mae: m.mae,
                    r2: m.r2,
                });
                sets.push(m);
            }
            summary.push(SweepSummaryEntry {
                arm: arm.to_string(),
                fraction,
                folds: sets.len(),
                mean: MetricSet::mean(&sets),
            });
        }
    }
    Ok(SweepResult {
        rows,
        summary,
        skipped_fractions: skipped,
    })
}

/// Both arms share the checkpoint's encoder architecture; only the pretrained
/// arm loads its weights.
fn finetune_arm(init: Option<&Checkpoint>, arch: &Checkpoint, train: &[Example], test: &[Example], task: Task, cfg: &RunConfig, seed: u64) -> Result<(MetricSet, Vec<Vec<f64>>)> {
    if init.is_some() {
        return finetune_run(init, train, test, task, cfg, seed);
    }
    let mut scratch_cfg = cfg.clone();
    scratch_cfg.model.encoder = arch.manifest.config.model.encoder.clone();
    finetune_run(None, train, test, task, &scratch_cfg, seed)
}

/// Writes the sweep CSV and summary JSON into `dir`.
pub fn write_sweep(result: &SweepResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in &result.rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SWEEP_SUMMARY);
    std::fs::write(&path, serde_json::to_vec_pretty(&result.summary)?).map_err(|e| Error::io(&path, e))
}
