//! Fixtures shared by the benchmarks.

use neuropt::config::RunConfig;
use neuropt::nn::ParamStore;
use neuropt::pretrain::MultiTaskNet;
use neuropt::swin::TokenGrid;
use neuropt::voldata::{generate_phantom, PhantomParams, Sample};

/// Deterministic pseudo-random values in [-1, 1).
pub fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn grid(dims: [usize; 3], channels: usize) -> TokenGrid<f32> {
    TokenGrid::new(dims, channels, values(dims.iter().product::<usize>() * channels, 1))
}

pub fn phantom(size: usize, regions: usize) -> Sample {
    generate_phantom(PhantomParams::new(3, size, regions)).expect("phantom")
}

/// Toy-scale network with initialized parameters.
pub fn toy_net() -> (RunConfig, MultiTaskNet, ParamStore<f32>) {
    let cfg = RunConfig::toy(8);
    let mut ps = ParamStore::new();
    let net = MultiTaskNet::new(&cfg.model, &mut ps, &mut neuropt::rng::derive(0, "init")).expect("network");
    (cfg, net, ps)
}
