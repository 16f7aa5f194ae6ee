use rand::Rng;

use crate::error::{Error, Result};
use crate::voldata::{flat_index, voxel_count, Shape3, Volume};

/// Cut-out mask over a coarse grid of `mask_patch`-sided cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MimMask {
    pub grid_shape: Shape3,
    pub grid: Vec<bool>,
    pub mask_patch: usize,
    pub ratio: f64,
}

impl MimMask {
    pub fn masked_cells(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn view_shape(&self) -> Shape3 {
        self.grid_shape.map(|g| g * self.mask_patch)
    }

    #[inline]
    pub fn is_masked(&self, z: usize, y: usize, x: usize) -> bool {
        let p = self.mask_patch;
        self.grid[flat_index(self.grid_shape, z / p, y / p, x / p)]
    }

    /// Per-voxel mask at view resolution.
    pub fn voxel_mask(&self) -> Vec<bool> {
        let s = self.view_shape();
        let mut out = Vec::with_capacity(voxel_count(s));
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    out.push(self.is_masked(z, y, x));
                }
            }
        }
        out
    }

    /// Zeroes masked voxels.
    pub fn apply(&self, volume: &Volume) -> Result<Volume> {
        if volume.shape() != self.view_shape() {
            return Err(Error::invalid("mask and volume shapes differ"));
        }
        let mut out = volume.clone();
        for (v, m) in out.data_mut().iter_mut().zip(self.voxel_mask()) {
            if m {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

/// Exactly `round(ratio * cells)` cells chosen uniformly without replacement.
pub fn make_mim_mask(view_shape: Shape3, mask_patch: usize, ratio: f64, rng: &mut impl Rng) -> Result<MimMask> {
    if mask_patch == 0 || view_shape.iter().any(|&d| d == 0 || d % mask_patch != 0) {
        return Err(Error::invalid(format!(
            "view shape {view_shape:?} not divisible by mask patch {mask_patch}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let grid_shape = view_shape.map(|d| d / mask_patch);
    let cells = voxel_count(grid_shape);
    let k = (ratio * cells as f64).round() as usize;
    let mut grid = vec![false; cells];
    for i in rand::seq::index::sample(rng, cells, k) {
        grid[i] = true;
    }
    Ok(MimMask {
        grid_shape,
        grid,
        mask_patch,
        ratio,
    })
}
