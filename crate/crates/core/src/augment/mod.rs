//! Multi-view extraction and augmentation: the labelled training unit built
//! from one sample.

mod location;
mod mask;
mod rotation;
mod views;

pub use location::{location_input, make_location_task, LocationTaskSpec, NUM_OCTANTS};
pub use mask::{make_mim_mask, MimMask};
pub use rotation::{rotate90, rotate_labels, Axis, RotationSpec, NUM_ROTATIONS};
pub use views::{build_views, AugmentedView, ViewKind, ViewPair, ViewSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voldata::Volume;

/// View geometry and augmentation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewGeometry {
    pub global_size: usize,
    pub local_crop: usize,
    pub local_size: usize,
    pub num_local: usize,
    pub mask_patch: usize,
    pub mask_ratio: f64,
    pub sub_patch_size: usize,
    pub max_gap: usize,
    /// Half-width of the multiplicative jitter range around 1.
    pub jitter_scale: f64,
    /// Half-width of the additive jitter range around 0.
    pub jitter_shift: f64,
    /// Side of the encoder input built for each location sub-patch.
    pub location_input_size: usize,
}

impl Default for ViewGeometry {
    fn default() -> Self {
        Self {
            global_size: 128,
            local_crop: 56,
            local_size: 64,
            num_local: 3,
            mask_patch: 16,
            mask_ratio: 0.75,
            sub_patch_size: 24,
            max_gap: 8,
            jitter_scale: 0.1,
            jitter_shift: 0.1,
            location_input_size: 32,
        }
    }
}

impl ViewGeometry {
    /// Desk-scale geometry with every view at 32^3.
    pub fn toy() -> Self {
        Self {
            global_size: 32,
            local_crop: 24,
            local_size: 32,
            mask_patch: 8,
            sub_patch_size: 12,
            max_gap: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, size) in [("global_size", self.global_size), ("local_size", self.local_size)] {
            if size == 0 || size % self.mask_patch.max(1) != 0 {
                return Err(Error::Config(format!("{name} {size} not divisible by mask_patch {}", self.mask_patch)));
            }
        }
        if self.num_local == 0 {
            return Err(Error::Config("num_local must be at least 1".into()));
        }
        if 2 * (self.sub_patch_size + self.max_gap) > self.local_size {
            return Err(Error::Config(format!(
                "2*(sub_patch_size + max_gap) = {} exceeds local_size {}",
                2 * (self.sub_patch_size + self.max_gap),
                self.local_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.jitter_scale < 0.0 || self.jitter_shift < 0.0 {
            return Err(Error::Config("mask_ratio or jitter ranges out of range".into()));
        }
        Ok(())
    }
}

pub fn apply_jitter(volume: &Volume, scale: f32, shift: f32) -> Volume {
    let mut out = volume.clone();
    for v in out.data_mut() {
        *v = scale * *v + shift;
    }
    out
}

/// `a * v + b` with `a ~ U[1 - jitter_scale, 1 + jitter_scale]` and
/// `b ~ U[-jitter_shift, jitter_shift]`. Returns the volume and `(a, b)`.
pub fn intensity_jitter(volume: &Volume, rng: &mut impl Rng, geometry: &ViewGeometry) -> (Volume, (f32, f32)) {
    let a = 1.0 + uniform_sym(rng, geometry.jitter_scale) as f32;
    let b = uniform_sym(rng, geometry.jitter_shift) as f32;
    (apply_jitter(volume, a, b), (a, b))
}

fn uniform_sym(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_identity_and_scale() {
        let v = Volume::from_fn([2, 2, 2], [1.0; 3], |z, y, x| (z + y + x) as f32 / 3.0).unwrap();
        assert_eq!(apply_jitter(&v, 1.0, 0.0), v);
        let s = apply_jitter(&v, 1.1, 0.0);
        assert!((s.min_max().1 - 1.1).abs() < 1e-6);
    }

    #[test]
    fn jitter_reproducible_and_in_range() {
        let v = Volume::filled([2, 2, 2], 1.0).unwrap();
        let g = ViewGeometry::default();
        let (_, ab1) = intensity_jitter(&v, &mut crate::rng::stream(9), &g);
        let (_, ab2) = intensity_jitter(&v, &mut crate::rng::stream(9), &g);
        assert_eq!(ab1, ab2);
        assert!((0.9..=1.1).contains(&ab1.0) && (-0.1..=0.1).contains(&ab1.1));
    }

    #[test]
    fn geometry_validation() {
        ViewGeometry::default().validate().unwrap();
        ViewGeometry::toy().validate().unwrap();
        let bad = ViewGeometry {
            sub_patch_size: 30,
            ..ViewGeometry::default()
        };
        assert!(bad.validate().is_err());
    }
}
