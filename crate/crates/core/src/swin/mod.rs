//! Hierarchical 3D Swin Transformer encoder.

mod block;
pub mod window;

pub use block::{BlockCache, SwinBlock};
pub use window::{relative_index_table, roll, window_partition, window_reverse, AttentionLayout, WindowBlocks};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Grads, LayerNorm, LnCache, Linear, ParamStore, Real, Init};
use crate::voldata::{flat_index, voxel_count, Shape3, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window: usize,
    /// Merge after the last stage too, doubling the bottleneck width.
    pub merge_after_every_stage: bool,
    pub mlp_ratio: usize,
    pub contrastive_dim: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl SwinConfig {
    /// Full-size encoder: 48 channels, depths 2/2/18/2, 7^3 windows.
    pub fn full_size() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 48,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![3, 6, 12, 24],
            window: 7,
            merge_after_every_stage: true,
            mlp_ratio: 4,
            contrastive_dim: 512,
        }
    }

    /// Small encoder used for CPU-scale experiments.
    pub fn toy() -> Self {
        Self {
            embed_dim: 12,
            depths: vec![1, 1, 2, 1],
            window: 4,
            ..Self::full_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return bad(format!("depths ({}) and num_heads ({}) must be non-empty and equally long", self.depths.len(), self.num_heads.len()));
        }
        if self.patch_size == 0 || self.window == 0 || self.mlp_ratio == 0 || self.embed_dim == 0 || self.contrastive_dim == 0 {
            return bad("patch_size, window, mlp_ratio, embed_dim and contrastive_dim must be positive".into());
        }
        for (i, (&d, &h)) in self.stage_dims().iter().zip(&self.num_heads).enumerate() {
            if h == 0 || d % h != 0 {
                return bad(format!("stage {i} width {d} is not divisible by {h} heads"));
            }
        }
        Ok(())
    }

    /// Channel width inside each stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.depths.len()).map(|i| self.embed_dim << i).collect()
    }

    pub fn num_merges(&self) -> usize {
        if self.merge_after_every_stage {
            self.depths.len()
        } else {
            self.depths.len() - 1
        }
    }

    /// Width of the final grid and of the pooled embedding.
    pub fn bottleneck_dim(&self) -> usize {
        self.embed_dim << self.num_merges()
    }

    /// Total spatial reduction from voxels to final tokens.
    pub fn downsample(&self) -> usize {
        self.patch_size << self.num_merges()
    }
}

/// Channels-last token features on a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T = f32> {
    pub dims: Shape3,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T> TokenGrid<T> {
    pub fn new(dims: Shape3, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), voxel_count(dims) * channels, "token grid size mismatch");
        Self { dims, channels, data }
    }

    pub fn num_tokens(&self) -> usize {
        voxel_count(self.dims)
    }
}

/// Pyramid of grids (post-embed, then one per stage) and the pooled vector.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub pyramid: Vec<TokenGrid<T>>,
    pub z: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    fn patches<T: Real>(&self, x: &[T], dims: Shape3) -> (Vec<T>, Shape3) {
        let p = self.patch;
        let td = dims.map(|d| d / p);
        let mut out = Vec::with_capacity(voxel_count(dims));
        for z in 0..td[0] {
            for y in 0..td[1] {
                for w in 0..td[2] {
                    for a in 0..p {
                        for b in 0..p {
                            for c in 0..p {
                                out.push(x[flat_index(dims, z * p + a, y * p + b, w * p + c)]);
                            }
                        }
                    }
                }
            }
        }
        (out, td)
    }
}

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub in_dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    /// Concatenates 2^3 neighbours (odd extents repeat their last slice).
    fn gather<T: Real>(&self, x: &[T], dims: Shape3) -> (Vec<T>, Shape3) {
        let c = self.in_dim;
        let od = dims.map(|d| d.div_ceil(2));
        let mut out = Vec::with_capacity(voxel_count(od) * 8 * c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for w in 0..od[2] {
                    for s in 0..8 {
                        let src = merge_source(dims, [z, y, w], s);
                        out.extend_from_slice(&x[src * c..(src + 1) * c]);
                    }
                }
            }
        }
        (out, od)
    }

    fn scatter<T: Real>(&self, d: &[T], dims: Shape3) -> Vec<T> {
        let c = self.in_dim;
        let od = dims.map(|d| d.div_ceil(2));
        let mut dx = vec![T::zero(); voxel_count(dims) * c];
        let mut row = 0;
        for z in 0..od[0] {
            for y in 0..od[1] {
                for w in 0..od[2] {
                    for s in 0..8 {
                        let dst = merge_source(dims, [z, y, w], s) * c;
                        let src = (row * 8 + s) * c;
                        for i in 0..c {
                            dx[dst + i] += d[src + i];
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, grid: &TokenGrid<T>) -> TokenGrid<T> {
        self.forward_cached(ps, &grid.data, grid.dims).0
    }

    fn forward_cached<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dims: Shape3) -> (TokenGrid<T>, LnCache<T>, Vec<T>) {
        let (cat, od) = self.gather(x, dims);
        let (h, ln) = self.norm.forward(ps, &cat);
        let y = self.reduction.forward(ps, &h, voxel_count(od));
        (TokenGrid::new(od, 2 * self.in_dim, y), ln, h)
    }

    pub fn num_params(&self) -> usize {
        2 * 8 * self.in_dim + self.reduction.num_params()
    }
}

fn merge_source(dims: Shape3, o: [usize; 3], s: usize) -> usize {
    let off = [s >> 2, (s >> 1) & 1, s & 1];
    let p = [0, 1, 2].map(|a| (2 * o[a] + off[a]).min(dims[a] - 1));
    flat_index(dims, p[0], p[1], p[2])
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub config: SwinConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<SwinStage>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    dims: Shape3,
    layouts: [AttentionLayout; 2],
    blocks: Vec<BlockCache<T>>,
    merge: Option<(LnCache<T>, Vec<T>)>,
}

/// Activations of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    patches: Vec<T>,
    embed_norm: LnCache<T>,
    stages: Vec<StageCache<T>>,
}

impl SwinEncoder {
    /// Registers all encoder parameters under `encoder.`.
    pub fn new<T: Real>(config: &SwinConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p3 = config.patch_size.pow(3);
        let embed = PatchEmbed {
            patch: config.patch_size,
            proj: Linear::new(ps, "encoder.embed.proj", p3, c, true, Init::TruncNormal(0.02), rng),
            norm: LayerNorm::new(ps, "encoder.embed.norm", c, rng),
        };
        let merges = config.num_merges();
        let mut stages = Vec::new();
        for (i, (&dim, (&depth, &heads))) in config.stage_dims().iter().zip(config.depths.iter().zip(&config.num_heads)).enumerate() {
            let blocks = (0..depth)
                .map(|j| SwinBlock::new(ps, &format!("encoder.stages.{i}.blocks.{j}"), dim, heads, config.window, config.mlp_ratio, j % 2 == 1, rng))
                .collect();
            let merge = (i < merges).then(|| PatchMerge {
                in_dim: dim,
                norm: LayerNorm::new(ps, &format!("encoder.stages.{i}.merge.norm"), 8 * dim, rng),
                reduction: Linear::new(ps, &format!("encoder.stages.{i}.merge.reduction"), 8 * dim, 2 * dim, false, Init::TruncNormal(0.02), rng),
            });
            stages.push(SwinStage { blocks, merge });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
        })
    }

    pub fn num_params(&self) -> usize {
        let e = self.embed.proj.num_params() + 2 * self.config.embed_dim;
        e + self
            .stages
            .iter()
            .map(|s| s.blocks.iter().map(SwinBlock::num_params).sum::<usize>() + s.merge.as_ref().map_or(0, PatchMerge::num_params))
            .sum::<usize>()
    }

    pub fn check_input(&self, dims: Shape3) -> Result<()> {
        let f = self.config.downsample();
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::invalid(format!("view dims {dims:?} must be positive multiples of {f}")));
        }
        Ok(())
    }

    /// Patch embedding of a raw single-channel volume.
    pub fn patch_embed<T: Real>(&self, ps: &ParamStore<T>, volume: &Volume) -> Result<TokenGrid<T>> {
        let dims = volume.shape();
        if dims.iter().any(|&d| d == 0 || d % self.config.patch_size != 0) {
            return Err(Error::invalid(format!("volume dims {dims:?} must be divisible by patch size {}", self.config.patch_size)));
        }
        let x: Vec<T> = volume.data().iter().map(|&v| T::of(v as f64)).collect();
        let (patches, td) = self.embed.patches(&x, dims);
        let y = self.embed.proj.forward(ps, &patches, voxel_count(td));
        Ok(TokenGrid::new(td, self.config.embed_dim, self.embed.norm.infer(ps, &y)))
    }

    /// Forward pass without retained activations.
    pub fn encode<T: Real>(&self, ps: &ParamStore<T>, volume: &Volume) -> Result<EncoderOutput<T>> {
        let x: Vec<T> = volume.data().iter().map(|&v| T::of(v as f64)).collect();
        Ok(self.run(ps, &x, volume.shape(), false)?.0)
    }

    /// Forward pass keeping what [`SwinEncoder::backward`] needs.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dims: Shape3) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.run(ps, x, dims, true)
    }

    fn run<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dims: Shape3, keep: bool) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.check_input(dims)?;
        if x.len() != voxel_count(dims) {
            return Err(Error::invalid("input length does not match dims"));
        }
        let (patches, td) = self.embed.patches(x, dims);
        let e = self.embed.proj.forward(ps, &patches, voxel_count(td));
        let (h, embed_norm) = self.embed.norm.forward(ps, &e);
        let mut pyramid = vec![TokenGrid::new(td, self.config.embed_dim, h)];
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (stage, &dim) in self.stages.iter().zip(&self.config.stage_dims()) {
            let prev = pyramid.last().unwrap();
            let sd = prev.dims;
            let layouts = [AttentionLayout::new(sd, self.config.window, false), AttentionLayout::new(sd, self.config.window, true)];
            let mut cur = prev.data.clone();
            let mut bcaches = Vec::new();
            for b in &stage.blocks {
                let (y, c) = b.forward(ps, &cur, &layouts[b.shifted as usize], keep);
                if keep {
                    bcaches.push(c);
                }
                cur = y;
            }
            let (out, mcache) = match &stage.merge {
                Some(m) => {
                    let (g, ln, hcat) = m.forward_cached(ps, &cur, sd);
                    (g, keep.then_some((ln, hcat)))
                }
                None => (TokenGrid::new(sd, dim, cur), None),
            };
            pyramid.push(out);
            stage_caches.push(StageCache {
                dims: sd,
                layouts,
                blocks: bcaches,
                merge: mcache,
            });
        }
        let last = pyramid.last().unwrap();
        let z = mean_pool(last);
        let cache = EncoderCache {
            patches: if keep { patches } else { Vec::new() },
            embed_norm,
            stages: stage_caches,
        };
        Ok((EncoderOutput { pyramid, z }, cache))
    }

    /// Backpropagates gradients w.r.t. pyramid levels (empty = none) and the
    /// pooled vector into `grads`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &EncoderCache<T>, out: &EncoderOutput<T>, d_pyramid: &[Vec<T>], dz: Option<&[T]>, grads: &mut Grads<T>) {
        assert!(!cache.patches.is_empty(), "encoder cache was not kept");
        let levels = out.pyramid.len();
        let last = &out.pyramid[levels - 1];
        let mut g = level_grad(d_pyramid, levels - 1, last.data.len());
        if let Some(dz) = dz {
            let inv = T::one() / T::of(last.num_tokens() as f64);
            for row in g.chunks_exact_mut(last.channels) {
                for (a, &b) in row.iter_mut().zip(dz) {
                    *a += b * inv;
                }
            }
        }
        for (si, (stage, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let n = voxel_count(sc.dims);
            if let (Some(m), Some((ln, hcat))) = (&stage.merge, &sc.merge) {
                let dh = m.reduction.backward(ps, hcat, &g, voxel_count(sc.dims.map(|d| d.div_ceil(2))), grads, true);
                let dcat = m.norm.backward(ps, ln, &dh, grads);
                g = m.scatter(&dcat, sc.dims);
            }
            debug_assert_eq!(g.len(), n * stage.blocks.first().map_or(g.len() / n.max(1), |b| b.dim));
            for (b, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                g = b.backward(ps, bc, &sc.layouts[b.shifted as usize], &g, grads);
            }
            let extra = level_grad(d_pyramid, si, g.len());
            for (a, b) in g.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let n0 = out.pyramid[0].num_tokens();
        let de = self.embed.norm.backward(ps, &cache.embed_norm, &g, grads);
        self.embed.proj.backward(ps, &cache.patches, &de, n0, grads, false);
    }
}

fn level_grad<T: Real>(d: &[Vec<T>], level: usize, len: usize) -> Vec<T> {
    match d.get(level) {
        Some(v) if !v.is_empty() => {
            assert_eq!(v.len(), len, "pyramid gradient {level} has wrong size");
            v.clone()
        }
        _ => vec![T::zero(); len],
    }
}

/// Mean over tokens.
pub fn mean_pool<T: Real>(grid: &TokenGrid<T>) -> Vec<T> {
    let mut z = vec![T::zero(); grid.channels];
    for row in grid.data.chunks_exact(grid.channels) {
        for (a, &b) in z.iter_mut().zip(row) {
            *a += b;
        }
    }
    let inv = T::one() / T::of(grid.num_tokens() as f64);
    z.iter_mut().for_each(|v| *v = *v * inv);
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> SwinConfig {
        SwinConfig {
            embed_dim: 4,
            depths: vec![2, 1],
            num_heads: vec![1, 2],
            window: 2,
            mlp_ratio: 2,
            ..SwinConfig::full_size()
        }
    }

    #[test]
    fn full_size_shapes_and_count() {
        let cfg = SwinConfig::full_size();
        assert_eq!(cfg.stage_dims(), vec![48, 96, 192, 384]);
        assert_eq!(cfg.bottleneck_dim(), 768);
        assert_eq!(cfg.downsample(), 32);
        let mut ps = ParamStore::<f32>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut crate::rng::stream(0)).unwrap();
        assert_eq!(enc.num_params(), ps.num_scalars());
        // Independent count: per block 12C^2 + 13C + 13^3 heads.
        let block = |c: usize, h: usize| 12 * c * c + 13 * c + 2197 * h;
        let merge = |c: usize| 16 * c + 16 * c * c;
        let expect = 8 * 48 + 48 + 96
            + [(48, 3, 2), (96, 6, 2), (192, 12, 18), (384, 24, 2)].iter().map(|&(c, h, d)| d * block(c, h) + merge(c)).sum::<usize>();
        assert_eq!(ps.num_scalars(), expect);
        // 4^3 x 384 merges to 2^3 x 768.
        let m = &enc.stages[3].merge.as_ref().unwrap();
        assert_eq!(m.num_params(), 8 * 384 * 2 + 8 * 384 * 768);
    }

    #[test]
    fn classic_schedule_stops_at_eight_c() {
        let cfg = SwinConfig {
            merge_after_every_stage: false,
            ..SwinConfig::full_size()
        };
        assert_eq!(cfg.bottleneck_dim(), 384);
        assert_eq!(cfg.downsample(), 16);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SwinConfig::toy();
        assert!(cfg.validate().is_ok());
        cfg.num_heads = vec![5, 6, 12, 24];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.num_heads = vec![3, 6, 12];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes_and_divisibility() {
        let cfg = SwinConfig::toy();
        let mut ps = ParamStore::<f32>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut crate::rng::stream(0)).unwrap();
        let v = Volume::filled([32, 32, 32], 0.5).unwrap();
        let g = enc.patch_embed(&ps, &v).unwrap();
        assert_eq!((g.dims, g.channels), ([16, 16, 16], 12));
        let odd = Volume::filled([31, 32, 32], 0.5).unwrap();
        assert!(matches!(enc.patch_embed(&ps, &odd), Err(Error::InvalidArgument(_))));
        assert!(matches!(enc.encode::<f32>(&ps, &Volume::filled([16, 32, 32], 0.0).unwrap()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_volume_embeds_to_bias() {
        let cfg = SwinConfig::toy();
        let mut ps = ParamStore::<f64>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut crate::rng::stream(0)).unwrap();
        let (p, td) = enc.embed.patches(&vec![0.0; 8 * 8 * 8], [8, 8, 8]);
        assert_eq!(td, [4, 4, 4]);
        let y = enc.embed.proj.forward(&ps, &p, 64);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_pyramid_shapes() {
        let cfg = SwinConfig::toy();
        let mut ps = ParamStore::<f32>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut crate::rng::stream(0)).unwrap();
        let v = Volume::from_fn([32, 32, 32], [1.0; 3], |z, y, x| ((z * 7 + y * 3 + x) % 11) as f32 / 11.0).unwrap();
        let out = enc.encode::<f32>(&ps, &v).unwrap();
        let shapes: Vec<_> = out.pyramid.iter().map(|g| (g.dims[0], g.channels)).collect();
        assert_eq!(shapes, vec![(16, 12), (8, 24), (4, 48), (2, 96), (1, 192)]);
        assert_eq!(out.z.len(), 192);
    }

    #[test]
    fn merge_pads_odd_grids_by_repetition() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = crate::rng::stream(0);
        let m = PatchMerge {
            in_dim: 1,
            norm: LayerNorm::new(&mut ps, "n", 8, &mut rng),
            reduction: Linear::new(&mut ps, "r", 8, 2, false, Init::Ones, &mut rng),
        };
        let (cat, od) = m.gather(&[1.0, 2.0, 3.0], [1, 1, 3]);
        assert_eq!(od, [1, 1, 2]);
        assert_eq!(&cat[8..16], &[3.0; 8]);
        assert_eq!(&cat[..8], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn encoder_gradients() {
        let cfg = tiny();
        let mut rng = crate::rng::stream(1);
        let mut ps = ParamStore::<f64>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut rng).unwrap();
        for e in ps.entries_mut() {
            for v in &mut e.data {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let dims = [8, 8, 8];
        let mut x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r0: Vec<f64> = (0..64 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rz: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Loss touches the first pyramid level and z.
        let loss = |ps: &ParamStore<f64>, x: &[f64]| {
            let (o, _) = enc.forward(ps, x, dims).unwrap();
            o.pyramid[0].data.iter().zip(&r0).map(|(a, b)| a * b).sum::<f64>() + o.z.iter().zip(&rz).map(|(a, b)| a * b).sum::<f64>()
        };
        let (o, c) = enc.forward(&ps, &x, dims).unwrap();
        let mut grads = Grads::new(&ps);
        let mut dp = vec![Vec::new(); o.pyramid.len()];
        dp[0] = r0.clone();
        enc.backward(&ps, &c, &o, &dp, Some(&rz), &mut grads);
        let eps = 1e-6;
        let mut checked = 0;
        for p in 0..ps.len() {
            let id = crate::nn::ParamId(p);
            let len = ps.get(id).len();
            for i in (0..len).step_by(1 + len / 12) {
                let orig = ps.get(id)[i];
                ps.get_mut(id)[i] = orig + eps;
                let lp = loss(&ps, &x);
                ps.get_mut(id)[i] = orig - eps;
                let lm = loss(&ps, &x);
                ps.get_mut(id)[i] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = grads.get(id).map_or(0.0, |g| g[i]);
                assert!((num - ana).abs() < 1e-4 * num.abs().max(ana.abs()) + 1e-8, "{}[{i}]: {ana} vs {num}", ps.entries()[p].name);
                checked += 1;
            }
        }
        assert!(checked > 100);
        x[0] += 0.0;
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = SwinConfig {
            embed_dim: 4,
            depths: vec![2, 2],
            num_heads: vec![1, 2],
            window: 2,
            mlp_ratio: 2,
            ..SwinConfig::full_size()
        };
        let mut rng = crate::rng::stream(2);
        let mut ps = ParamStore::<f64>::new();
        let enc = SwinEncoder::new(&cfg, &mut ps, &mut rng).unwrap();
        let dims = [16, 16, 16];
        let x: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (o, c) = enc.forward(&ps, &x, dims).unwrap();
        let dz: Vec<f64> = (0..o.z.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = Grads::new(&ps);
        let dlast: Vec<f64> = (0..o.pyramid[2].data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dp = vec![Vec::new(); 3];
        dp[2] = dlast;
        enc.backward(&ps, &c, &o, &dp, Some(&dz), &mut grads);
        for (i, e) in ps.entries().iter().enumerate() {
            let g = grads.get(crate::nn::ParamId(i)).expect("gradient slot");
            if e.name.ends_with("relative_bias") {
                // Only offsets realized inside a window get gradient.
                let realized = g.chunks_exact(e.shape[1]).filter(|r| r.iter().any(|&v| v != 0.0)).count();
                assert!(realized > 0, "{}", e.name);
            } else if e.name.ends_with("qkv.bias") {
                // Softmax is invariant to the key bias; only query and value
                // biases can move the output.
                let c = e.shape[0] / 3;
                assert!(g[..c].iter().chain(&g[2 * c..]).all(|&v| v != 0.0), "{}", e.name);
            } else {
                let dead = g.iter().filter(|&&v| v == 0.0).count();
                assert_eq!(dead, 0, "{} has {dead} zero gradients", e.name);
            }
        }
    }

    #[test]
    fn forward_is_finite_across_seeds() {
        let cfg = SwinConfig::toy();
        for seed in 0..100 {
            let mut rng = crate::rng::stream(seed);
            let mut ps = ParamStore::<f32>::new();
            let enc = SwinEncoder::new(&cfg, &mut ps, &mut rng).unwrap();
            let v = Volume::from_fn([32, 32, 32], [1.0; 3], |_, _, _| rng.gen_range(-3.0..3.0)).unwrap();
            let out = enc.encode::<f32>(&ps, &v).unwrap();
            assert!(out.z.iter().all(|v| v.is_finite()));
            assert!(out.pyramid.iter().all(|g| g.data.iter().all(|v| v.is_finite())));
        }
    }
}
