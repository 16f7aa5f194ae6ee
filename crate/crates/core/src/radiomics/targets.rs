use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{glcm_features, glcm_matrix, glszm::glszm_features_of, glszm_matrix, quantize, FEATURES_PER_GROUP, GLCM_FEATURES, GLSZM_FEATURES};
use crate::error::{Error, Result};
use crate::voldata::{ParcellationMap, RadiomicsTargets, Sample, Volume};

/// Tissue groups, in target order.
pub const NUM_GROUPS: usize = 3;

/// Names of the concatenated per-group target vector.
pub fn target_names() -> Vec<String> {
    (1..=NUM_GROUPS)
        .flat_map(|g| {
            GLCM_FEATURES
                .iter()
                .chain(GLSZM_FEATURES.iter())
                .map(move |n| format!("group{g}_{n}"))
        })
        .collect()
}

/// Raw (un-normalized) features for each tissue group, concatenated.
/// A group with no voxels yields zeros for its block.
pub fn region_features(
    volume: &Volume,
    labels: &ParcellationMap,
    tissue_groups: &[u8],
    levels: usize,
) -> Result<Vec<f64>> {
    if volume.shape() != labels.shape() {
        return Err(Error::invalid("volume and labels differ in shape"));
    }
    let mut out = Vec::with_capacity(NUM_GROUPS * FEATURES_PER_GROUP);
    for g in 1..=NUM_GROUPS as u8 {
        let mask: Vec<bool> = labels
            .labels()
            .iter()
            .map(|&l| l != 0 && tissue_groups.get(l as usize).copied() == Some(g))
            .collect();
        if !mask.iter().any(|&m| m) {
            out.extend(std::iter::repeat(0.0).take(FEATURES_PER_GROUP));
            continue;
        }
        let q = quantize(volume, &mask, levels)?;
        let glcm = glcm_matrix(&q, volume.shape(), &mask, levels);
        out.extend(glcm_features(&glcm).values);
        let glszm = glszm_matrix(&q, volume.shape(), &mask, levels)?;
        out.extend(glszm_features_of(&glszm).values);
    }
    Ok(out)
}

/// Per-index corpus statistics used to z-score target vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsStats {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RadiomicsStats {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let Some(first) = rows.first() else {
            return Err(Error::invalid("no rows to fit statistics"));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged feature rows"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..width).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..width)
            .map(|k| (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let feature_names = if width == NUM_GROUPS * FEATURES_PER_GROUP {
            target_names()
        } else {
            (0..width).map(|k| format!("feature{k}")).collect()
        };
        Ok(Self {
            feature_names,
            mean,
            std,
        })
    }

    /// Zero-variance indices map to 0.
    pub fn apply(&self, raw: &[f64]) -> Vec<f32> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if s > 0.0 { ((v - m) / s) as f32 } else { 0.0 })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Z-scored texture targets for a sample using corpus statistics.
pub fn region_targets(sample: &Sample, levels: usize, stats: &RadiomicsStats) -> Result<RadiomicsTargets> {
    let groups = &sample.radiomics.tissue_groups;
    let populated = (1..=NUM_GROUPS as u8)
        .filter(|g| {
            sample
                .parcellation
                .labels()
                .iter()
                .any(|&l| l != 0 && groups.get(l as usize) == Some(g))
        })
        .count();
    if populated < NUM_GROUPS {
        return Err(Error::invalid(format!(
            "sample {} has only {populated} populated tissue groups",
            sample.sample_id
        )));
    }
    let raw = region_features(&sample.volume, &sample.parcellation, groups, levels)?;
    if stats.mean.len() != raw.len() {
        return Err(Error::invalid("statistics width differs from target width"));
    }
    Ok(RadiomicsTargets {
        values: stats.apply(&raw),
        tissue_groups: groups.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cover_72_targets() {
        let names = target_names();
        assert_eq!(names.len(), 72);
        assert_eq!(names[0], "group1_glcm_autocorrelation");
        assert_eq!(names[71], "group3_glszm_gray_level_non_uniformity");
    }

    #[test]
    fn zero_variance_maps_to_zero() {
        let rows = [vec![1.0, 2.0], vec![1.0, 4.0]];
        let stats = RadiomicsStats::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(stats.apply(&[1.0, 4.0]), vec![0.0, 1.0]);
    }
}
