use super::FeatureVector;
use crate::error::{Error, Result};
use crate::voldata::{flat_index, Shape3};

pub const GLSZM_FEATURES: [&str; 4] = [
    "glszm_small_area_emphasis",
    "glszm_large_area_emphasis",
    "glszm_zone_entropy",
    "glszm_gray_level_non_uniformity",
];

/// Zone counts indexed by (gray level, zone size).
#[derive(Debug, Clone, PartialEq)]
pub struct GlszmMatrix {
    pub levels: usize,
    pub max_zone: usize,
    /// Row-major `levels x max_zone`; entry `(i-1, s-1)` counts zones of level `i` and size `s`.
    pub counts: Vec<u64>,
}

impl GlszmMatrix {
    pub fn count(&self, level: usize, size: usize) -> u64 {
        self.counts[(level - 1) * self.max_zone + (size - 1)]
    }

    pub fn num_zones(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum of zone sizes, i.e. the number of voxels covered.
    pub fn num_voxels(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, &c)| c * ((k % self.max_zone) as u64 + 1))
            .sum()
    }
}

/// Connected same-level zones under 26-connectivity.
pub fn glszm_matrix(quantized: &[u16], shape: Shape3, mask: &[bool], levels: usize) -> Result<GlszmMatrix> {
    let n = quantized.len();
    let valid = |i: usize| mask[i] && quantized[i] > 0;
    if !(0..n).any(valid) {
        return Err(Error::invalid("empty region mask"));
    }
    let mut visited = vec![false; n];
    let mut zones: Vec<(usize, usize)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if visited[start] || !valid(start) {
            continue;
        }
        let level = quantized[start];
        visited[start] = true;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let x = i % shape[2];
            let y = (i / shape[2]) % shape[1];
            let z = i / (shape[1] * shape[2]);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= shape[0] as i64 || ny >= shape[1] as i64 || nx >= shape[2] as i64 {
                            continue;
                        }
                        let j = flat_index(shape, nz as usize, ny as usize, nx as usize);
                        if !visited[j] && valid(j) && quantized[j] == level {
                            visited[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        zones.push((level as usize, size));
    }
    let max_zone = zones.iter().map(|z| z.1).max().unwrap_or(1);
    let mut counts = vec![0u64; levels * max_zone];
    for (level, size) in zones {
        if level > levels {
            return Err(Error::invalid(format!("gray level {level} exceeds {levels}")));
        }
        counts[(level - 1) * max_zone + (size - 1)] += 1;
    }
    Ok(GlszmMatrix {
        levels,
        max_zone,
        counts,
    })
}

pub fn glszm_features(quantized: &[u16], shape: Shape3, mask: &[bool], levels: usize) -> Result<FeatureVector> {
    let m = glszm_matrix(quantized, shape, mask, levels)?;
    Ok(glszm_features_of(&m))
}

pub(crate) fn glszm_features_of(m: &GlszmMatrix) -> FeatureVector {
    let nz = m.num_zones() as f64;
    let (mut sae, mut lae, mut entropy) = (0.0, 0.0, 0.0);
    let mut per_level = vec![0.0; m.levels];
    for i in 1..=m.levels {
        for s in 1..=m.max_zone {
            let c = m.count(i, s) as f64;
            if c == 0.0 {
                continue;
            }
            let s2 = (s * s) as f64;
            sae += c / s2;
            lae += c * s2;
            let p = c / nz;
            entropy -= p * p.log2();
            per_level[i - 1] += c;
        }
    }
    let gln = per_level.iter().map(|c| c * c).sum::<f64>() / nz;
    FeatureVector {
        names: GLSZM_FEATURES.to_vec(),
        values: vec![sae / nz, lae / nz, entropy, gln],
    }
}
