use rand::Rng;

use super::HeadsConfig;
use crate::nn::{gelu, gelu_backward, Conv3d, Grads, LayerNorm, LnCache, ParamStore, Real, UpConv};
use crate::swin::{SwinConfig, TokenGrid};
use crate::voldata::{voxel_count, Shape3};
use crate::{Error, Result};

/// Upsample, concatenate a skip, then conv-norm-GELU twice.
#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub up: UpConv,
    pub skip_channels: usize,
    pub conv1: Conv3d,
    pub norm1: LayerNorm,
    pub conv2: Conv3d,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct LevelCache<T> {
    x: Vec<T>,
    in_dims: Shape3,
    cols1: Vec<T>,
    ln1: LnCache<T>,
    a1: Vec<T>,
    g1: Vec<T>,
    ln2: LnCache<T>,
    a2: Vec<T>,
}

impl DecoderLevel {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, skip: usize, width: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: UpConv::new(ps, &format!("{name}.up"), cin, width, rng),
            skip_channels: skip,
            conv1: Conv3d::new(ps, &format!("{name}.conv1"), width + skip, width, kernel, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width, rng),
            conv2: Conv3d::new(ps, &format!("{name}.conv2"), width, width, 1, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width, rng),
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], in_dims: Shape3, skip: &[T], keep: bool) -> (Vec<T>, Option<LevelCache<T>>) {
        let od = in_dims.map(|d| 2 * d);
        let n = voxel_count(od);
        let w = self.up.out_ch;
        let s = self.skip_channels;
        let up = self.up.forward(ps, x, in_dims);
        let mut cat = Vec::with_capacity(n * (w + s));
        for (u, k) in up.chunks_exact(w).zip(skip.chunks_exact(s)) {
            cat.extend_from_slice(u);
            cat.extend_from_slice(k);
        }
        drop(up);
        let (h1, cols1) = self.conv1.forward(ps, &cat, od);
        let (a1, ln1) = self.norm1.forward(ps, &h1);
        let g1 = gelu(&a1);
        let (h2, _) = self.conv2.forward(ps, &g1, od);
        let (a2, ln2) = self.norm2.forward(ps, &h2);
        let y = gelu(&a2);
        let cache = keep.then(|| LevelCache {
            x: x.to_vec(),
            in_dims,
            cols1,
            ln1,
            a1,
            g1,
            ln2,
            a2,
        });
        (y, cache)
    }

    /// Returns `(d input, d skip)`.
    fn backward<T: Real>(&self, ps: &ParamStore<T>, c: &LevelCache<T>, dy: &[T], grads: &mut Grads<T>) -> (Vec<T>, Vec<T>) {
        let od = c.in_dims.map(|d| 2 * d);
        let w = self.up.out_ch;
        let s = self.skip_channels;
        let da2 = gelu_backward(&c.a2, dy);
        let dh2 = self.norm2.backward(ps, &c.ln2, &da2, grads);
        let dg1 = self.conv2.backward(ps, &c.g1, &dh2, od, grads);
        let da1 = gelu_backward(&c.a1, &dg1);
        let dh1 = self.norm1.backward(ps, &c.ln1, &da1, grads);
        let dcat = self.conv1.backward(ps, &c.cols1, &dh1, od, grads);
        let n = voxel_count(od);
        let mut dup = Vec::with_capacity(n * w);
        let mut dskip = Vec::with_capacity(n * s);
        for r in dcat.chunks_exact(w + s) {
            dup.extend_from_slice(&r[..w]);
            dskip.extend_from_slice(&r[w..]);
        }
        let dx = self.up.backward(ps, &c.x, &dup, c.in_dims, grads);
        (dx, dskip)
    }

    fn num_params(&self) -> usize {
        let w = self.up.out_ch;
        self.up.lin.num_params() + w + self.conv1.lin.num_params() + self.conv2.lin.num_params() + 4 * w
    }
}

/// UNet-style decoder from the encoder pyramid back to voxel resolution.
/// Logits are channels-last: `voxels x (num_regions + 1)`, class 0 is
/// background.
#[derive(Debug, Clone)]
pub struct SegDecoder {
    /// Coarse to fine; the last level uses the input volume as its skip.
    pub levels: Vec<DecoderLevel>,
    pub out: Conv3d,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    levels: Vec<LevelCache<T>>,
    last: Vec<T>,
    dims: Shape3,
}

impl SegDecoder {
    pub fn new<T: Real>(cfg: &HeadsConfig, swin: &SwinConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if !swin.merge_after_every_stage {
            return Err(Error::Config("the segmentation decoder needs a merge after every stage".into()));
        }
        // Pyramid widths: embed, then one per stage.
        let mut widths = vec![swin.embed_dim];
        widths.extend(swin.stage_dims().iter().map(|d| 2 * d));
        let final_width = if cfg.decoder_final_width == 0 { swin.embed_dim } else { cfg.decoder_final_width };
        let mut levels = Vec::new();
        let mut cin = *widths.last().unwrap();
        for l in (0..widths.len() - 1).rev() {
            levels.push(DecoderLevel::new(ps, &format!("heads.seg.levels.{}", levels.len()), cin, widths[l], widths[l], cfg.decoder_kernel, rng));
            cin = widths[l];
        }
        levels.push(DecoderLevel::new(ps, &format!("heads.seg.levels.{}", levels.len()), cin, 1, final_width, cfg.decoder_kernel, rng));
        let num_classes = cfg.num_regions + 1;
        let out = Conv3d::new(ps, "heads.seg.out", final_width, num_classes, 1, rng);
        Ok(Self { levels, out, num_classes })
    }

    pub fn num_params(&self) -> usize {
        self.levels.iter().map(DecoderLevel::num_params).sum::<usize>() + self.out.lin.num_params()
    }

    fn check<T>(&self, pyramid: &[TokenGrid<T>], dims: Shape3) -> Result<()> {
        if pyramid.len() != self.levels.len() {
            return Err(Error::invalid(format!("decoder has {} levels, pyramid has {}", self.levels.len(), pyramid.len())));
        }
        for (l, lvl) in self.levels.iter().enumerate() {
            let (src, skip_dims, skip_c) = if l + 1 < self.levels.len() {
                let s = &pyramid[pyramid.len() - 2 - l];
                (&pyramid[pyramid.len() - 1 - l], s.dims, s.channels)
            } else {
                (&pyramid[0], dims, 1)
            };
            if src.channels != lvl.up.in_ch || skip_c != lvl.skip_channels || src.dims.map(|d| 2 * d) != skip_dims {
                return Err(Error::invalid(format!("pyramid level {l} does not match the decoder")));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, pyramid: &[TokenGrid<T>], volume: &[T], dims: Shape3, keep: bool) -> Result<(Vec<T>, Option<DecoderCache<T>>)> {
        self.check(pyramid, dims)?;
        let top = pyramid.last().unwrap();
        let mut x = top.data.clone();
        let mut xd = top.dims;
        let mut caches = Vec::new();
        for (l, lvl) in self.levels.iter().enumerate() {
            let skip: &[T] = if l + 1 < self.levels.len() { &pyramid[pyramid.len() - 2 - l].data } else { volume };
            let (y, c) = lvl.forward(ps, &x, xd, skip, keep);
            caches.extend(c);
            x = y;
            xd = xd.map(|d| 2 * d);
        }
        let (logits, _) = self.out.forward(ps, &x, dims);
        let cache = keep.then(|| DecoderCache { levels: caches, last: x, dims });
        Ok((logits, cache))
    }

    /// Gradients w.r.t. each pyramid level, in pyramid order.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &DecoderCache<T>, dlogits: &[T], grads: &mut Grads<T>) -> Vec<Vec<T>> {
        let n_levels = self.levels.len();
        let mut d_pyr = vec![Vec::new(); n_levels];
        let mut g = self.out.backward(ps, &cache.last, dlogits, cache.dims, grads);
        for (l, (lvl, c)) in self.levels.iter().zip(&cache.levels).enumerate().rev() {
            let (dx, dskip) = lvl.backward(ps, c, &g, grads);
            if l + 1 < n_levels {
                d_pyr[n_levels - 2 - l] = dskip;
            }
            g = dx;
        }
        d_pyr[n_levels - 1] = g;
        d_pyr
    }
}
