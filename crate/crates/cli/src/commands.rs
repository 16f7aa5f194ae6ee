use std::path::Path;

use neuropt::config::RunConfig;
use neuropt::downstream::{self, Task};
use neuropt::pretrain::{load_checkpoint, read_manifest, run_pretraining, Checkpoint};
use neuropt::radiomics::{region_features, target_names};
use neuropt::voldata::{generate_phantom, read_dataset, write_dataset, DatasetIndex, PhantomParams, Sample};

use crate::overrides::parse_set;
use crate::{CliError, ConfigArgs, EvalArgs, FinetuneArgs, InspectArgs, LabelKind, PhantomArgs, Preset, PretrainArgs, RadiomicsArgs, SweepArgs, TaskArgs, TaskKind};

pub const CV_REPORT: &str = "cv_report.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const RADIOMICS_CSV: &str = "radiomics.csv";
const BINARY_OFFSET: f32 = 3.0;

type Res<T = ()> = Result<T, CliError>;

/// Prints a result line; a closed stdout is not an error.
fn emit(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(neuropt::Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Res {
    let bytes = serde_json::to_vec_pretty(value).map_err(neuropt::Error::from)?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn phantom(a: &PhantomArgs) -> Res {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = neuropt::rng::derive_seed(a.seed, &format!("phantom/{i}"));
        let mut s = generate_phantom(PhantomParams::new(seed, a.size, a.regions))?;
        s.sample_id = format!("phantom-{i:04}");
        samples.push(s);
    }
    let labels = match a.label {
        LabelKind::None => None,
        LabelKind::Binary => {
            let labels: Vec<f64> = (0..a.count).map(|i| (i % 2) as f64).collect();
            for (s, _) in samples.iter_mut().zip(&labels).filter(|(_, &l)| l == 1.0) {
                brighten_foreground(s, BINARY_OFFSET);
            }
            Some(labels)
        }
    };
    write_dataset(&a.out, &samples, labels.as_deref())?;
    emit(format!("wrote {} phantoms to {}", a.count, a.out.display()));
    Ok(())
}

fn brighten_foreground(s: &mut Sample, offset: f32) {
    let support = s.parcellation.support();
    for (v, &m) in s.volume.data_mut().iter_mut().zip(&support) {
        if m {
            *v += offset;
        }
    }
}

/// Preset (or `base`), then the config file, then `--set` and dotted flags.
fn resolve_config(c: &ConfigArgs, dotted: &[(String, String)], base: Option<&RunConfig>, num_regions: usize, out: &Path) -> Res<RunConfig> {
    let base = match (base, c.preset) {
        (Some(b), None) => b.clone(),
        (_, preset) => match preset.unwrap_or(Preset::Default) {
            Preset::Default => RunConfig::default(),
            Preset::Toy => RunConfig::toy(num_regions),
            Preset::Tiny => RunConfig::tiny(num_regions),
        },
    };
    let mut overrides = parse_set(&c.set).map_err(CliError::Usage)?;
    overrides.extend_from_slice(dotted);
    let mut cfg = RunConfig::load(&base, c.config.as_deref(), &overrides).map_err(|e| match e {
        neuropt::Error::Config(_) | neuropt::Error::Json(_) => CliError::Usage(e.to_string()),
        other => CliError::Run(other),
    })?;
    cfg.output_dir = out.display().to_string();
    Ok(cfg)
}

fn num_regions(data: &Path) -> Res<usize> {
    Ok(DatasetIndex::load(data)?.num_regions)
}

pub fn pretrain(a: &PretrainArgs, dotted: &[(String, String)]) -> Res {
    let k = num_regions(&a.data)?;
    let cfg = resolve_config(&a.cfg, dotted, None, k, &a.out)?;
    if cfg.model.heads.num_regions != k {
        return Err(CliError::Run(neuropt::Error::Config(format!(
            "dataset has {k} regions but model.heads.num_regions is {}; use --preset toy|tiny or override the head sizes",
            cfg.model.heads.num_regions
        ))));
    }
    let (samples, _) = read_dataset(&a.data)?;
    let summary = run_pretraining(&cfg, samples, &a.out, a.resume.as_deref())?;
    match summary.last {
        Some(r) => emit(format!("step {} loss {:.6}; checkpoint {}", r.step, r.loss_total, summary.final_checkpoint.display())),
        None => emit(format!("nothing to do; checkpoint {}", summary.final_checkpoint.display())),
    }
    Ok(())
}

fn task_of(t: &TaskArgs) -> Task {
    match t.task {
        TaskKind::Classify => Task::Classify { num_classes: t.classes },
        TaskKind::Regress => Task::Regress,
    }
}

/// Labelled examples of a dataset; every sample must carry a label.
fn labelled(data: &Path, cfg: &RunConfig) -> Res<Vec<downstream::Example>> {
    let (samples, labels) = read_dataset(data)?;
    let labels: Vec<f64> = samples
        .iter()
        .zip(labels)
        .map(|(s, l)| l.ok_or_else(|| neuropt::Error::InvalidArgument(format!("sample {} has no label", s.sample_id))))
        .collect::<Result<_, _>>()?;
    Ok(downstream::examples(&samples, &labels, cfg)?)
}

fn downstream_setup(cfg_args: &ConfigArgs, dotted: &[(String, String)], checkpoint: Option<&Path>, data: &Path, out: &Path) -> Res<(Option<Checkpoint>, RunConfig)> {
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let cfg = resolve_config(cfg_args, dotted, ck.as_ref().map(|c| &c.manifest.config), num_regions(data)?, out)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    cfg.write_resolved(out)?;
    Ok((ck, cfg))
}

pub fn finetune(a: &FinetuneArgs, dotted: &[(String, String)]) -> Res {
    let (ck, cfg) = downstream_setup(&a.cfg, dotted, a.checkpoint.as_deref(), &a.data, &a.out)?;
    let task = task_of(&a.task);
    let data = labelled(&a.data, &cfg)?;
    let report = downstream::cross_validate(ck.as_ref(), &data, task, &cfg)?;
    write_json(&a.out.join(CV_REPORT), &report)?;
    write_predictions(&a.out.join(PREDICTIONS_CSV), &report.predictions)?;
    emit(serde_json::to_string(&report.mean).map_err(neuropt::Error::from)?);
    Ok(())
}

fn write_predictions(path: &Path, preds: &[downstream::Prediction]) -> Res {
    let width = preds.first().map_or(0, |p| p.output.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["id".to_string(), "fold".into(), "label".into()];
    header.extend((0..width).map(|i| format!("out_{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for p in preds {
        let mut rec = vec![p.id.clone(), p.fold.to_string(), p.label.to_string()];
        rec.extend(p.output.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn eval(a: &EvalArgs) -> Res {
    let path = &a.predictions;
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let bad = |m: String| CliError::Run(neuropt::Error::InvalidArgument(format!("{}: {m}", path.display())));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| -> Res<f64> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("bad number in column {i}"))) };
        let fold = num(1)? as usize;
        let label = num(2)?;
        let output = (3..rec.len()).map(num).collect::<Res<Vec<f64>>>()?;
        rows.push((fold, output, label));
    }
    let (folds, mean) = downstream::fold_metrics(&rows, task_of(&a.task))?;
    let report = serde_json::json!({ "folds": folds, "mean": mean });
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    emit(serde_json::to_string_pretty(&report).map_err(neuropt::Error::from)?);
    Ok(())
}

pub fn sweep(a: &SweepArgs, dotted: &[(String, String)]) -> Res {
    let (ck, cfg) = downstream_setup(&a.cfg, dotted, Some(&a.checkpoint), &a.data, &a.out)?;
    let ck = ck.expect("checkpoint loaded");
    let data = labelled(&a.data, &cfg)?;
    let result = downstream::label_fraction_sweep(&ck, &data, task_of(&a.task), &cfg)?;
    downstream::write_sweep(&result, &a.out)?;
    emit(format!("{} rows; skipped fractions {:?}", result.rows.len(), result.skipped_fractions));
    Ok(())
}

pub fn radiomics(a: &RadiomicsArgs) -> Res {
    let (samples, _) = read_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let path = a.out.join(RADIOMICS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(target_names());
    w.write_record(&header).map_err(|e| io_err(&path, e))?;
    for s in &samples {
        let f = region_features(&s.volume, &s.parcellation, &s.radiomics.tissue_groups, a.levels)?;
        let mut rec = vec![s.sample_id.clone()];
        rec.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    emit(format!("wrote {} rows to {}", samples.len(), path.display()));
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Res {
    let manifest = if a.verify { load_checkpoint(&a.checkpoint)?.manifest } else { read_manifest(&a.checkpoint)? };
    emit(serde_json::to_string_pretty(&manifest).map_err(neuropt::Error::from)?);
    Ok(())
}
