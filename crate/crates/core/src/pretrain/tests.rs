use super::*;
use crate::losses::TaskSet;
use crate::voldata::{generate_phantom, PhantomParams};

fn phantoms(n: u64) -> Vec<Sample> {
    (0..n).map(|s| generate_phantom(PhantomParams::new(s, 32, 4)).unwrap()).collect()
}

#[test]
fn schedule_examples() {
    let cfg = OptimConfig::default();
    let total = 10_000;
    assert_eq!(lr_at_step(0, total, &cfg), 0.0);
    assert_eq!(lr_at_step(cfg.warmup_steps, total, &cfg), cfg.base_lr);
    assert!(lr_at_step(total, total, &cfg) <= 1e-8 * cfg.base_lr);
    assert!(lr_at_step(250, total, &cfg) < lr_at_step(251, total, &cfg));
    assert!(lr_at_step(5000, total, &cfg) > lr_at_step(5001, total, &cfg));
}

#[test]
fn steps_per_epoch_drops_partial_batch() {
    let cfg = OptimConfig {
        batch_size: 3,
        total_epochs: 4,
        max_steps: Some(10),
        ..OptimConfig::default()
    };
    assert_eq!(cfg.steps_per_epoch(8), 2);
    assert_eq!(cfg.total_steps(8), 8);
    assert_eq!(cfg.total_steps(30), 10);
}

#[test]
fn checkpoint_round_trip_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::tiny(4);
    let samples = phantoms(4);
    let mut t = Trainer::new(&cfg, samples.clone()).unwrap();
    t.next_step().unwrap();
    let path = dir.path().join("a.dmtc");
    t.save(&path).unwrap();

    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.manifest.step, 1);
    assert_eq!(ck.manifest.config, cfg);
    let r = Trainer::resume(&cfg, samples.clone(), &ck).unwrap();
    assert_eq!(r.state, t.state);
    let v = &samples[0].volume;
    let small = crate::voldata::resize_trilinear(v, [16; 3]).unwrap();
    assert_eq!(r.encode(&small).unwrap().z, t.encode(&small).unwrap().z);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corruption(_))));
    assert!(read_manifest(&path).is_ok());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::tiny(4);
    let samples = phantoms(4);
    let mut a = Trainer::new(&cfg, samples.clone()).unwrap();
    let full: Vec<MetricsRecord> = (0..4).map(|_| a.next_step().unwrap()).collect();

    let mut b = Trainer::new(&cfg, samples.clone()).unwrap();
    let mut split: Vec<MetricsRecord> = (0..2).map(|_| b.next_step().unwrap()).collect();
    b.save(dir.path().join("mid.dmtc")).unwrap();
    drop(b);
    let ck = load_checkpoint(dir.path().join("mid.dmtc")).unwrap();
    let mut c = Trainer::resume(&cfg, samples, &ck).unwrap();
    split.extend((0..2).map(|_| c.next_step().unwrap()));
    assert_eq!(full, split);
    assert_eq!(a.state, c.state);
}

#[test]
fn run_writes_one_line_per_step_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny(4);
    cfg.optim.total_epochs = 5;
    cfg.optim.checkpoint_every = 8;
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let summary = run_pretraining(&cfg, phantoms(8), &out, None).unwrap();
        (summary, std::fs::read_to_string(out.join(METRICS_FILE)).unwrap())
    };
    let (s1, m1) = run("a");
    let (_, m2) = run("b");
    assert_eq!(s1.steps, 20);
    assert_eq!(m1.lines().count(), 20);
    assert_eq!(m1, m2);
    for (i, line) in m1.lines().enumerate() {
        let rec: MetricsRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.step, i as u64);
        assert_eq!(rec.epoch, i as u64 / 4);
        assert!(rec.loss_total.is_finite());
    }
    assert!(dir.path().join("a/step-00000008.dmtc").exists());
    assert!(dir.path().join("a").join(crate::config::RESOLVED_CONFIG_FILE).exists());

    // Resuming from step 8 appends the remaining lines unchanged.
    let resumed = dir.path().join("c");
    std::fs::create_dir_all(&resumed).unwrap();
    let head: String = m1.lines().take(8).map(|l| format!("{l}\n")).collect();
    std::fs::write(resumed.join(METRICS_FILE), head).unwrap();
    run_pretraining(&cfg, phantoms(8), &resumed, Some(&dir.path().join("a/step-00000008.dmtc"))).unwrap();
    assert_eq!(std::fs::read_to_string(resumed.join(METRICS_FILE)).unwrap(), m1);
    assert_eq!(
        load_checkpoint(resumed.join(FINAL_CHECKPOINT)).unwrap().tensors,
        load_checkpoint(dir.path().join("a").join(FINAL_CHECKPOINT)).unwrap().tensors
    );
}

#[test]
fn contrast_needs_two_samples_per_batch() {
    let mut cfg = RunConfig::tiny(4);
    cfg.optim.batch_size = 1;
    let mut t = Trainer::new(&cfg, phantoms(2)).unwrap();
    assert!(matches!(t.next_step(), Err(Error::Config(_))));
    cfg.losses.tasks = TaskSet::from_groups(true, true, false);
    let mut t = Trainer::new(&cfg, phantoms(2)).unwrap();
    assert_eq!(t.next_step().unwrap().loss_contrast, 0.0);
}

#[test]
fn disabled_tasks_report_no_accuracy() {
    let mut cfg = RunConfig::tiny(4);
    cfg.losses.tasks = TaskSet::from_groups(true, false, false);
    let mut t = Trainer::new(&cfg, phantoms(2)).unwrap();
    let rec = t.next_step().unwrap();
    assert_eq!(rec.acc_rot, None);
    assert_eq!(rec.acc_loc, None);
    assert!(rec.loss_anatomy.is_finite());
}
