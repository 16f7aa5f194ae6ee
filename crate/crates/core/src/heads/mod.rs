//! Task heads attached to the encoder.

mod decoder;

pub use decoder::{DecoderCache, DecoderLevel, SegDecoder};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gelu, gelu_backward, Grads, Init, Linear, ParamStore, Real};
use crate::swin::{SwinConfig, TokenGrid};
use crate::voldata::{flat_index, Shape3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    /// Foreground regions; segmentation predicts one extra background class.
    pub num_regions: usize,
    pub morphology_dim: usize,
    pub radiomics_dim: usize,
    /// Kernel of the first convolution at every decoder level.
    pub decoder_kernel: usize,
    /// Width of the full-resolution decoder level (0 = embed width).
    pub decoder_final_width: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            num_regions: 120,
            morphology_dim: 274,
            radiomics_dim: 72,
            decoder_kernel: 3,
            decoder_final_width: 0,
        }
    }
}

impl HeadsConfig {
    /// Heads sized for phantoms with `num_regions` regions.
    pub fn for_phantoms(num_regions: usize) -> Self {
        Self {
            num_regions,
            morphology_dim: 2 * num_regions,
            radiomics_dim: 72,
            decoder_kernel: 1,
            decoder_final_width: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_regions == 0 || self.morphology_dim == 0 || self.radiomics_dim == 0 {
            return Err(Error::Config("head output sizes must be positive".into()));
        }
        if self.decoder_kernel % 2 == 0 {
            return Err(Error::Config(format!("decoder_kernel must be odd, got {}", self.decoder_kernel)));
        }
        Ok(())
    }
}

/// Two affine maps with a GELU between them.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    z: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

impl MlpHead {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, true, Init::TruncNormal(0.02), rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, true, Init::TruncNormal(0.02), rng),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, z: &[T]) -> (Vec<T>, MlpCache<T>) {
        let u = self.fc1.forward(ps, z, 1);
        let g = gelu(&u);
        let y = self.fc2.forward(ps, &g, 1);
        (y, MlpCache { z: z.to_vec(), u, g })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &MlpCache<T>, dy: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let dg = self.fc2.backward(ps, &cache.g, dy, 1, grads, true);
        let du = gelu_backward(&cache.u, &dg);
        self.fc1.backward(ps, &cache.z, &du, 1, grads, true)
    }
}

/// Linear projection per final token followed by a 3D pixel shuffle back to
/// voxel resolution.
#[derive(Debug, Clone)]
pub struct MimHead {
    pub factor: usize,
    pub proj: Linear,
}

impl MimHead {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, factor: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(ps, name, in_dim, factor.pow(3), true, Init::TruncNormal(0.02), rng);
        Self { factor, proj }
    }

    fn check<T>(&self, grid: &TokenGrid<T>, view: Shape3) -> Result<()> {
        if grid.dims.map(|d| d * self.factor) != view {
            return Err(Error::invalid(format!(
                "final grid {:?} does not upsample by {} to view {view:?}",
                grid.dims, self.factor
            )));
        }
        Ok(())
    }

    /// Reconstruction with the view's shape.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, grid: &TokenGrid<T>, view: Shape3) -> Result<Vec<T>> {
        self.check(grid, view)?;
        let y = self.proj.forward(ps, &grid.data, grid.num_tokens());
        Ok(pixel_shuffle(&y, grid.dims, self.factor))
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grid: &TokenGrid<T>, drecon: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let dy = pixel_unshuffle(drecon, grid.dims, self.factor);
        self.proj.backward(ps, &grid.data, &dy, grid.num_tokens(), grads, true)
    }
}

/// Token channel `(a f + b) f + c` lands on voxel offset `(a, b, c)`.
pub fn pixel_shuffle<T: Copy + Default>(y: &[T], dims: Shape3, f: usize) -> Vec<T> {
    let out_dims = dims.map(|d| d * f);
    let mut out = vec![T::default(); y.len()];
    let f3 = f * f * f;
    for z in 0..dims[0] {
        for yy in 0..dims[1] {
            for x in 0..dims[2] {
                let src = &y[flat_index(dims, z, yy, x) * f3..][..f3];
                for a in 0..f {
                    for b in 0..f {
                        let dst = flat_index(out_dims, z * f + a, yy * f + b, x * f);
                        out[dst..dst + f].copy_from_slice(&src[(a * f + b) * f..(a * f + b + 1) * f]);
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle<T: Copy + Default>(v: &[T], dims: Shape3, f: usize) -> Vec<T> {
    let out_dims = dims.map(|d| d * f);
    let mut y = vec![T::default(); v.len()];
    let f3 = f * f * f;
    for z in 0..dims[0] {
        for yy in 0..dims[1] {
            for x in 0..dims[2] {
                let dst = &mut y[flat_index(dims, z, yy, x) * f3..][..f3];
                for a in 0..f {
                    for b in 0..f {
                        let src = flat_index(out_dims, z * f + a, yy * f + b, x * f);
                        dst[(a * f + b) * f..(a * f + b + 1) * f].copy_from_slice(&v[src..src + f]);
                    }
                }
            }
        }
    }
    y
}

/// Linear projection onto the unit sphere.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache<T> {
    z: Vec<T>,
    raw: Vec<T>,
    norm: T,
    pub degenerate: bool,
}

/// Norm below which the projection is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

impl ContrastiveHead {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(ps, name, in_dim, out_dim, true, Init::TruncNormal(0.02), rng),
        }
    }

    /// Unit vector; a vanishing projection yields the first basis vector and
    /// sets `degenerate`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, z: &[T]) -> (Vec<T>, ProjectionCache<T>) {
        let raw = self.proj.forward(ps, z, 1);
        let norm = raw.iter().map(|&v| v * v).sum::<T>().sqrt();
        let degenerate = !(norm.f64() > DEGENERATE_NORM);
        let out = if degenerate {
            let mut e = vec![T::zero(); raw.len()];
            e[0] = T::one();
            e
        } else {
            raw.iter().map(|&v| v / norm).collect()
        };
        (out, ProjectionCache { z: z.to_vec(), raw, norm, degenerate })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &ProjectionCache<T>, dy: &[T], grads: &mut Grads<T>) -> Vec<T> {
        if cache.degenerate {
            return vec![T::zero(); cache.z.len()];
        }
        let n = cache.norm;
        let dot: T = cache.raw.iter().zip(dy).map(|(&r, &g)| r * g).sum();
        let draw: Vec<T> = cache.raw.iter().zip(dy).map(|(&r, &g)| (g - r * dot / (n * n)) / n).collect();
        self.proj.backward(ps, &cache.z, &draw, 1, grads, true)
    }
}

/// All seven heads.
#[derive(Debug, Clone)]
pub struct TaskHeads {
    pub config: HeadsConfig,
    pub seg: SegDecoder,
    pub morphology: MlpHead,
    pub radiomics: MlpHead,
    pub location: Linear,
    pub rotation: Linear,
    pub mim: MimHead,
    pub contrastive: ContrastiveHead,
}

pub const NUM_LOCATION_CLASSES: usize = 8;
pub const NUM_ROTATION_CLASSES: usize = 10;

impl TaskHeads {
    pub fn new<T: Real>(config: &HeadsConfig, swin: &SwinConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        swin.validate()?;
        let zd = swin.bottleneck_dim();
        let tn = Init::TruncNormal(0.02);
        Ok(Self {
            config: config.clone(),
            seg: SegDecoder::new(config, swin, ps, rng)?,
            morphology: MlpHead::new(ps, "heads.morphology", zd, zd, config.morphology_dim, rng),
            radiomics: MlpHead::new(ps, "heads.radiomics", zd, zd, config.radiomics_dim, rng),
            location: Linear::new(ps, "heads.location", zd, NUM_LOCATION_CLASSES, true, tn, rng),
            rotation: Linear::new(ps, "heads.rotation", zd, NUM_ROTATION_CLASSES, true, tn, rng),
            mim: MimHead::new(ps, "heads.mim", zd, swin.downsample(), rng),
            contrastive: ContrastiveHead::new(ps, "heads.contrastive", zd, swin.contrastive_dim, rng),
        })
    }

    /// Parameter totals: `(decoder, all other heads)`.
    pub fn param_split<T: Real>(&self, ps: &ParamStore<T>) -> (usize, usize) {
        let dec = ps.count_prefix("heads.seg.");
        (dec, ps.count_prefix("heads.") - dec)
    }
}
