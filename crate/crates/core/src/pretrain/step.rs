use rand::Rng;
use rayon::prelude::*;

use crate::augment::{location_input, AugmentedView, ViewGeometry, ViewSet};
use crate::config::ModelConfig;
use crate::heads::{MlpCache, ProjectionCache, TaskHeads};
use crate::losses::{cross_entropy, dice_loss, masked_l1, mim_l1, ntxent, total_loss, LossComponents, LossConfig, LossReport};
use crate::nn::{AdamW, AdamWState, Grads, ParamStore, Real};
use crate::radiomics::{FEATURES_PER_GROUP, NUM_GROUPS};
use crate::swin::{EncoderCache, EncoderOutput, SwinEncoder};
use crate::{Error, Result};

const ANATOMY: usize = 0;
const MORPHO: usize = 1;
const RADIOMICS: usize = 2;
const ROT: usize = 3;
const LOC: usize = 4;
const MIM: usize = 5;
const CONTRAST: usize = 6;

/// Encoder plus the seven task heads over one parameter store.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub encoder: SwinEncoder,
    pub heads: TaskHeads,
}

impl MultiTaskNet {
    pub fn new<T: Real>(model: &ModelConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let encoder = SwinEncoder::new(&model.encoder, ps, rng)?;
        let heads = TaskHeads::new(&model.heads, &model.encoder, ps, rng)?;
        Ok(Self { encoder, heads })
    }
}

/// Losses and pretext accuracies of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub report: LossReport,
    /// Rotation accuracy over all main views; NaN when the task is off.
    pub acc_rot: f64,
    /// Location accuracy over all sub-patches; NaN when the task is off.
    pub acc_loc: f64,
}

/// Everything one training step needs besides the parameters.
pub struct StepContext<'a> {
    pub net: &'a MultiTaskNet,
    pub geometry: &'a ViewGeometry,
    pub losses: &'a LossConfig,
    pub optimizer: AdamW,
    pub lr: f64,
    pub step: u64,
}

/// Indices of the morphology targets covered by a view's regions.
fn morphology_active(view: &AugmentedView, regions: &[u16]) -> Vec<usize> {
    let r = regions.len();
    let mut idx: Vec<usize> = view
        .present_regions
        .iter()
        .filter_map(|id| regions.iter().position(|x| x == id))
        .flat_map(|j| [j, r + j])
        .collect();
    idx.sort_unstable();
    idx
}

/// Indices of the texture targets whose tissue group occurs in the view.
fn radiomics_active(view: &AugmentedView, groups: &[u8], width: usize) -> Vec<usize> {
    let per = width / NUM_GROUPS;
    let mut seen = [false; NUM_GROUPS];
    for &r in &view.present_regions {
        if let Some(&g) = groups.get(r as usize) {
            if (1..=NUM_GROUPS as u8).contains(&g) {
                seen[g as usize - 1] = true;
            }
        }
    }
    (0..NUM_GROUPS).filter(|&g| seen[g]).flat_map(|g| g * per..(g + 1) * per).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn scaled(v: &[f64], s: f64) -> Vec<f32> {
    v.iter().map(|&x| (x * s) as f32).collect()
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

struct MainView<'a> {
    view: &'a AugmentedView,
    sample: &'a ViewSet,
    morph_idx: Vec<usize>,
    rad_idx: Vec<usize>,
}

/// Forward state of one main view kept until its encoder backward.
struct ViewState {
    out: EncoderOutput<f32>,
    cache: EncoderCache<f32>,
    d_pyramid: Vec<Vec<f32>>,
    dz: Vec<f32>,
    losses: [Option<f64>; 7],
    rot_correct: bool,
    proj: Option<(Vec<f32>, ProjectionCache<f32>)>,
}

struct Scales([f64; 7]);

fn main_view_forward(ctx: &StepContext, ps: &ParamStore<f32>, mv: &MainView, tasks: &[bool; 7], scales: &Scales, grads: &mut Grads<f32>) -> Result<ViewState> {
    let net = ctx.net;
    let h = &net.heads;
    let view = mv.view;
    let dims = view.input.shape();
    let x = view.input.data();
    let (out, cache) = net.encoder.forward(ps, x, dims)?;
    let levels = out.pyramid.len();
    let mut d_pyramid = vec![Vec::new(); levels];
    let mut dz = vec![0f32; out.z.len()];
    let mut losses = [None; 7];
    let add = |dst: &mut Vec<f32>, src: &[f32]| {
        if dst.is_empty() {
            dst.extend_from_slice(src);
        } else {
            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
        }
    };

    if tasks[ANATOMY] && !view.present_regions.is_empty() {
        let (logits, dcache) = h.seg.forward(ps, &out.pyramid, x, dims, true)?;
        let (loss, g) = dice_loss(&to_f64(&logits), h.seg.num_classes, view.labels.labels(), &view.present_regions)?;
        losses[ANATOMY] = Some(loss);
        let d = h.seg.backward(ps, dcache.as_ref().expect("kept"), &scaled(&g, scales.0[ANATOMY]), grads);
        for (dst, src) in d_pyramid.iter_mut().zip(&d) {
            add(dst, src);
        }
    }

    let mut mlp_task = |k: usize, head: &crate::heads::MlpHead, target: &[f32], idx: &[usize], grads: &mut Grads<f32>, dz: &mut Vec<f32>| -> Result<()> {
        if !tasks[k] || idx.is_empty() {
            return Ok(());
        }
        let (pred, c): (Vec<f32>, MlpCache<f32>) = head.forward(ps, &out.z);
        if pred.len() != target.len() {
            return Err(Error::Config(format!("{} head has {} outputs, targets have {}", crate::losses::TASK_NAMES[k], pred.len(), target.len())));
        }
        if let Some((loss, g)) = masked_l1(&to_f64(&pred), &to_f64(target), idx, ctx.losses.l1_reduction)? {
            losses[k] = Some(loss);
            let d = head.backward(ps, &c, &scaled(&g, scales.0[k]), grads);
            dz.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
        }
        Ok(())
    };
    mlp_task(MORPHO, &h.morphology, &mv.sample.morphology, &mv.morph_idx, grads, &mut dz)?;
    mlp_task(RADIOMICS, &h.radiomics, &mv.sample.radiomics, &mv.rad_idx, grads, &mut dz)?;

    let rot_logits = h.rotation.forward(ps, &out.z, 1);
    let rot_correct = argmax(&rot_logits) == view.rotation.class_id as usize;
    if tasks[ROT] {
        let (loss, g) = cross_entropy(&to_f64(&rot_logits), view.rotation.class_id as usize)?;
        losses[ROT] = Some(loss);
        let d = h.rotation.backward(ps, &out.z, &scaled(&g, scales.0[ROT]), 1, grads, true);
        dz.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
    }

    if tasks[MIM] {
        if let Some(mask) = &view.mask {
            let last = &out.pyramid[levels - 1];
            let recon = h.mim.forward(ps, last, dims)?;
            let (loss, g) = mim_l1(&to_f64(&recon), &to_f64(view.target.data()), &mask.voxel_mask())?;
            losses[MIM] = Some(loss);
            let d = h.mim.backward(ps, last, &scaled(&g, scales.0[MIM]), grads);
            add(&mut d_pyramid[levels - 1], &d);
        }
    }

    let proj = tasks[CONTRAST].then(|| h.contrastive.forward(ps, &out.z));
    Ok(ViewState {
        out,
        cache,
        d_pyramid,
        dz,
        losses,
        rot_correct,
        proj,
    })
}

/// One location sub-patch: forward, loss, and full backward.
fn location_patch(ctx: &StepContext, ps: &ParamStore<f32>, input: &crate::voldata::Volume, octant: usize, scale: f64) -> Result<(f64, bool, Grads<f32>)> {
    let net = ctx.net;
    let mut grads = Grads::new(ps);
    let (out, cache) = net.encoder.forward(ps, input.data(), input.shape())?;
    let logits = net.heads.location.forward(ps, &out.z, 1);
    let correct = argmax(&logits) == octant;
    let (loss, g) = cross_entropy(&to_f64(&logits), octant)?;
    let dz = net.heads.location.backward(ps, &out.z, &scaled(&g, scale), 1, &mut grads, true);
    net.encoder.backward(ps, &cache, &out, &[], Some(&dz), &mut grads);
    Ok((loss, correct, grads))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Forward and backward over a batch of view sets followed by one AdamW
/// update. Gradients are reduced in a fixed order, so the result does not
/// depend on the number of worker threads.
pub fn train_step(ctx: &StepContext, ps: &mut ParamStore<f32>, opt: &mut AdamWState<f32>, batch: &[ViewSet]) -> Result<StepOutput> {
    let tasks = ctx.losses.tasks.as_array();
    let weights = ctx.losses.weights();
    if !ctx.losses.tasks.any() {
        return Err(Error::Config("no pretext task is active".into()));
    }
    if tasks[CONTRAST] && batch.len() < 2 {
        return Err(Error::Config(format!("contrastive task needs a batch of at least 2, got {}", batch.len())));
    }
    let heads_cfg = &ctx.net.heads.config;
    let mut mains = Vec::new();
    for vs in batch {
        if vs.morphology.len() != heads_cfg.morphology_dim || vs.morphology.len() != 2 * vs.morphology_regions.len() {
            return Err(Error::Config(format!(
                "sample {} has {} morphology targets, head predicts {}",
                vs.sample_id,
                vs.morphology.len(),
                heads_cfg.morphology_dim
            )));
        }
        if vs.radiomics.len() != heads_cfg.radiomics_dim || vs.radiomics.len() != NUM_GROUPS * FEATURES_PER_GROUP {
            return Err(Error::Config(format!("sample {} has {} radiomics targets, head predicts {}", vs.sample_id, vs.radiomics.len(), heads_cfg.radiomics_dim)));
        }
        for view in vs.views() {
            mains.push(MainView {
                view,
                sample: vs,
                morph_idx: morphology_active(view, &vs.morphology_regions),
                rad_idx: radiomics_active(view, &vs.tissue_groups, vs.radiomics.len()),
            });
        }
    }
    let mut counts = [0usize; 7];
    counts[ANATOMY] = mains.iter().filter(|m| !m.view.present_regions.is_empty()).count();
    counts[MORPHO] = mains.iter().filter(|m| !m.morph_idx.is_empty()).count();
    counts[RADIOMICS] = mains.iter().filter(|m| !m.rad_idx.is_empty()).count();
    counts[ROT] = mains.len();
    counts[MIM] = mains.iter().filter(|m| m.view.mask.is_some()).count();
    let loc_jobs: Vec<(&crate::augment::ViewPair, usize)> = if tasks[LOC] {
        batch
            .iter()
            .flat_map(|vs| vs.locals.iter())
            .flat_map(|p| (0..p.location.len()).map(move |i| (p, i)))
            .collect()
    } else {
        Vec::new()
    };
    counts[LOC] = loc_jobs.len();
    let w = weights.as_array();
    let mut s = [0.0; 7];
    for k in 0..7 {
        s[k] = if counts[k] > 0 { w[k] / counts[k] as f64 } else { 0.0 };
    }
    s[CONTRAST] = w[CONTRAST];
    let scales = Scales(s);

    let snapshot: &ParamStore<f32> = ps;
    let mut total = Grads::new(snapshot);

    // Main views: heads and their gradients, encoder activations kept.
    let forwards: Vec<(ViewState, Grads<f32>)> = mains
        .par_iter()
        .map(|mv| {
            let mut g = Grads::new(snapshot);
            main_view_forward(ctx, snapshot, mv, &tasks, &scales, &mut g).map(|st| (st, g))
        })
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(forwards.len());
    for (st, g) in forwards {
        total.add(&g);
        states.push(st);
    }

    // Contrastive loss per view slot across the batch.
    let mut contrast_total = None;
    if tasks[CONTRAST] {
        let per_sample = states.len() / batch.len();
        let mut slot_sum = 0.0;
        let mut gz: Vec<Vec<f32>> = vec![Vec::new(); states.len()];
        for slot in 0..per_sample / 2 {
            let pick = |aug: usize| -> Vec<usize> { (0..batch.len()).map(|b| b * per_sample + 2 * slot + aug).collect() };
            let (ia, ib) = (pick(0), pick(1));
            let emb = |ids: &[usize]| -> Vec<Vec<f64>> { ids.iter().map(|&i| to_f64(&states[i].proj.as_ref().expect("projected").0)).collect() };
            let (loss, ga, gb) = ntxent(&emb(&ia), &emb(&ib), weights.temperature)?;
            slot_sum += loss;
            for (ids, gs) in [(&ia, ga), (&ib, gb)] {
                for (&i, g) in ids.iter().zip(gs) {
                    gz[i] = scaled(&g, scales.0[CONTRAST]);
                }
            }
        }
        contrast_total = Some(slot_sum);
        let contrast_grads: Vec<Grads<f32>> = states
            .par_iter_mut()
            .zip(gz.par_iter())
            .map(|(st, g)| {
                let mut grads = Grads::new(snapshot);
                let (_, pc) = st.proj.as_ref().expect("projected");
                let d = ctx.net.heads.contrastive.backward(snapshot, pc, g, &mut grads);
                st.dz.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                grads
            })
            .collect();
        for g in &contrast_grads {
            total.add(g);
        }
    }

    // Encoder backward for the main views.
    let enc_grads: Vec<Grads<f32>> = states
        .par_iter()
        .map(|st| {
            let mut g = Grads::new(snapshot);
            ctx.net.encoder.backward(snapshot, &st.cache, &st.out, &st.d_pyramid, Some(&st.dz), &mut g);
            g
        })
        .collect();
    for g in &enc_grads {
        total.add(g);
    }
    drop(enc_grads);

    // Location sub-patches on local views.
    let size = ctx.geometry.location_input_size;
    let loc_results: Vec<(f64, bool, Grads<f32>)> = loc_jobs
        .par_iter()
        .map(|&(pair, i)| {
            let spec = &pair.location[i];
            let input = location_input(&pair.augs[0].target, spec, size)?;
            location_patch(ctx, snapshot, &input, spec.octant_id as usize, scales.0[LOC])
        })
        .collect::<Result<_>>()?;
    let mut loc_losses = Vec::with_capacity(loc_results.len());
    let mut loc_correct = 0usize;
    for (l, c, g) in &loc_results {
        loc_losses.push(*l);
        loc_correct += *c as usize;
        total.add(g);
    }
    drop(loc_results);

    let collect = |k: usize| -> Vec<f64> { states.iter().filter_map(|s| s.losses[k]).collect() };
    let mut parts = LossComponents::default();
    for k in [ANATOMY, MORPHO, RADIOMICS, ROT, MIM] {
        parts.values[k] = mean(&collect(k));
    }
    parts.values[LOC] = mean(&loc_losses);
    parts.values[CONTRAST] = contrast_total;
    let report = total_loss(&parts, &weights, ctx.losses.tasks)?;
    if let Some(task) = report.non_finite_task() {
        return Err(Error::NonFinite { task, step: ctx.step });
    }
    if !total.all_finite() {
        return Err(Error::NonFinite { task: "gradient", step: ctx.step });
    }
    let acc_rot = if tasks[ROT] {
        states.iter().filter(|s| s.rot_correct).count() as f64 / states.len() as f64
    } else {
        f64::NAN
    };
    let acc_loc = if tasks[LOC] && !loc_losses.is_empty() {
        loc_correct as f64 / loc_losses.len() as f64
    } else {
        f64::NAN
    };
    drop(states);
    ctx.optimizer.step(ps, &total, opt, ctx.lr);
    Ok(StepOutput { report, acc_rot, acc_loc })
}
