//! Texture radiomics: gray-level co-occurrence (GLCM) and size-zone (GLSZM)
//! features over region masks.
//!
//! The feature lists are fixed. Changing them changes every stored target
//! vector and stats file.

mod glcm;
mod glszm;
mod targets;

pub use glcm::{glcm_features, glcm_matrix, GlcmMatrix, GLCM_FEATURES, OFFSETS_13};
pub use glszm::{glszm_features, glszm_matrix, GlszmMatrix, GLSZM_FEATURES};
pub use targets::{region_features, region_targets, target_names, RadiomicsStats, NUM_GROUPS};

use crate::error::{Error, Result};
use crate::voldata::Volume;

pub const DEFAULT_LEVELS: usize = 32;

/// Features per tissue group (GLCM followed by GLSZM).
pub const FEATURES_PER_GROUP: usize = GLCM_FEATURES.len() + GLSZM_FEATURES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<&'static str>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|&n| n == name).map(|i| self.values[i])
    }
}

/// Equal-width binning of masked intensities into `1..=levels` using the
/// masked min and max. Unmasked voxels map to 0; a constant region maps to 1.
pub fn quantize(volume: &Volume, mask: &[bool], levels: usize) -> Result<Vec<u16>> {
    if mask.len() != volume.len() {
        return Err(Error::invalid("mask length differs from volume"));
    }
    if levels == 0 || levels > u16::MAX as usize {
        return Err(Error::invalid(format!("unsupported level count {levels}")));
    }
    let (lo, hi) = volume
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if lo > hi {
        return Err(Error::invalid("empty region mask"));
    }
    let range = hi - lo;
    Ok(volume
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                0
            } else if range <= 0.0 {
                1
            } else {
                let b = ((v as f64 - lo) / range * levels as f64).floor() as usize;
                (b.min(levels - 1) + 1) as u16
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_region_is_bin_one() {
        let v = Volume::filled([3, 3, 3], 4.2).unwrap();
        let q = quantize(&v, &[true; 27], 32).unwrap();
        assert!(q.iter().all(|&b| b == 1));
    }

    #[test]
    fn two_values_two_bins() {
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let q = quantize(&v, &[true; 4], 2).unwrap();
        assert_eq!(q, vec![1, 2, 2, 1]);
    }

    #[test]
    fn ramp_fills_bins_equally() {
        let v = Volume::from_fn([1, 1, 32], [1.0; 3], |_, _, x| x as f32).unwrap();
        let q = quantize(&v, &[true; 32], 32).unwrap();
        let mut counts = [0usize; 33];
        for b in q {
            counts[b as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!(counts[1..].iter().all(|&c| c == 1));
    }

    #[test]
    fn unmasked_voxels_are_zero_and_empty_mask_fails() {
        let v = Volume::from_fn([1, 1, 4], [1.0; 3], |_, _, x| x as f32).unwrap();
        let q = quantize(&v, &[false, true, true, false], 4).unwrap();
        assert_eq!(q, vec![0, 1, 4, 0]);
        assert!(quantize(&v, &[false; 4], 4).is_err());
    }
}
