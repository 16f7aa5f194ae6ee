//! Trains the toy configuration on 16 phantoms and reports when the rotation
//! and location pretext accuracies and the MIM loss reach their targets.
//!
//! Usage: `toy_convergence [seed ...]` (default seeds 0 1 2).

use std::time::Instant;

use neuropt::config::RunConfig;
use neuropt::pretrain::Trainer;
use neuropt::voldata::{generate_phantom, PhantomParams};

const WINDOW: usize = 50;

fn trailing_mean(v: &[f64], end: usize, n: usize) -> f64 {
    let s = &v[end.saturating_sub(n)..end];
    s.iter().sum::<f64>() / s.len() as f64
}

fn main() -> neuropt::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    for seed in seeds {
        let samples = (0..16).map(|i| generate_phantom(PhantomParams::new(seed * 100 + i, 48, 8))).collect::<neuropt::Result<Vec<_>>>()?;
        let mut cfg = RunConfig::toy(8);
        cfg.seed = seed;
        let mut trainer = Trainer::new(&cfg, samples)?;
        let start = Instant::now();
        let (mut rot, mut loc, mut mim) = (Vec::new(), Vec::new(), Vec::new());
        let mut passed = None;
        while !trainer.is_done() && trainer.state.step < 2000 {
            let r = trainer.next_step()?;
            rot.push(r.acc_rot.unwrap_or(0.0));
            loc.push(r.acc_loc.unwrap_or(0.0));
            mim.push(r.loss_mim);
            let n = rot.len();
            let (ra, la) = (trailing_mean(&rot, n, WINDOW), trailing_mean(&loc, n, WINDOW));
            if n % 50 == 0 {
                println!("seed {seed} step {n} rot {ra:.3} loc {la:.3} mim {:.4} total {:.4} {:.0}s", trailing_mean(&mim, n, 10), r.loss_total, start.elapsed().as_secs_f64());
            }
            if n >= 1000 && ra >= 0.95 && la >= 0.90 {
                passed = Some(n);
                break;
            }
        }
        let mim_ratio = if mim.len() >= 1000 { trailing_mean(&mim, 1000, 10) / trailing_mean(&mim, 10, 10) } else { f64::NAN };
        println!(
            "seed {seed}: accuracy targets {} mim ratio {mim_ratio:.3} in {:.0}s",
            passed.map_or("not reached".to_string(), |s| format!("reached at step {s}")),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
