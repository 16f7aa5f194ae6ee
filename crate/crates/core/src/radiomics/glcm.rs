use super::FeatureVector;
use crate::voldata::{flat_index, Shape3};

/// The 13 unique unit offsets of the 26-neighbourhood, as (dz, dy, dx).
pub const OFFSETS_13: [[i32; 3]; 13] = [
    [0, 0, 1],
    [0, 1, -1],
    [0, 1, 0],
    [0, 1, 1],
    [1, -1, -1],
    [1, -1, 0],
    [1, -1, 1],
    [1, 0, -1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, -1],
    [1, 1, 0],
    [1, 1, 1],
];

pub const GLCM_FEATURES: [&str; 20] = [
    "glcm_autocorrelation",
    "glcm_joint_average",
    "glcm_cluster_prominence",
    "glcm_cluster_shade",
    "glcm_cluster_tendency",
    "glcm_contrast",
    "glcm_correlation",
    "glcm_difference_average",
    "glcm_difference_entropy",
    "glcm_difference_variance",
    "glcm_inverse_difference",
    "glcm_inverse_difference_moment",
    "glcm_idmn",
    "glcm_idn",
    "glcm_inverse_variance",
    "glcm_joint_energy",
    "glcm_joint_entropy",
    "glcm_maximum_probability",
    "glcm_sum_entropy",
    "glcm_sum_of_squares",
];

/// Symmetric, direction-summed co-occurrence probabilities at distance 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GlcmMatrix {
    pub levels: usize,
    /// Row-major `levels x levels`; entry `(i-1, j-1)` is the probability of gray levels `(i, j)`.
    pub probs: Vec<f64>,
    /// No neighbouring voxel pair exists inside the mask; `probs` is all zero.
    pub degenerate: bool,
}

impl GlcmMatrix {
    #[inline]
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.probs[(i - 1) * self.levels + (j - 1)]
    }
}

/// Counts every in-mask voxel pair along the 13 directions, adds the
/// transpose, sums over directions and normalizes. Quantized values must lie
/// in `0..=levels`; 0 (and `mask == false`) excludes a voxel.
pub fn glcm_matrix(quantized: &[u16], shape: Shape3, mask: &[bool], levels: usize) -> GlcmMatrix {
    let mut counts = vec![0u64; levels * levels];
    let inside = |z: i64, y: i64, x: i64| -> Option<usize> {
        if z < 0 || y < 0 || x < 0 || z >= shape[0] as i64 || y >= shape[1] as i64 || x >= shape[2] as i64 {
            return None;
        }
        let i = flat_index(shape, z as usize, y as usize, x as usize);
        (mask[i] && quantized[i] > 0).then_some(i)
    };
    for z in 0..shape[0] as i64 {
        for y in 0..shape[1] as i64 {
            for x in 0..shape[2] as i64 {
                let Some(a) = inside(z, y, x) else { continue };
                let ga = quantized[a] as usize - 1;
                for off in OFFSETS_13 {
                    if let Some(b) = inside(z + off[0] as i64, y + off[1] as i64, x + off[2] as i64) {
                        let gb = quantized[b] as usize - 1;
                        counts[ga * levels + gb] += 1;
                        counts[gb * levels + ga] += 1;
                    }
                }
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let degenerate = total == 0;
    let probs = counts
        .iter()
        .map(|&c| if degenerate { 0.0 } else { c as f64 / total as f64 })
        .collect();
    GlcmMatrix {
        levels,
        probs,
        degenerate,
    }
}

fn entropy2(ps: impl Iterator<Item = f64>) -> f64 {
    -ps.filter(|&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

/// The fixed 20 Haralick-family features. A degenerate matrix yields zeros;
/// correlation is 0 whenever either marginal has zero variance.
pub fn glcm_features(m: &GlcmMatrix) -> FeatureVector {
    let names = GLCM_FEATURES.to_vec();
    if m.degenerate {
        return FeatureVector {
            names,
            values: vec![0.0; 20],
        };
    }
    let l = m.levels;
    let mut mu_x = 0.0;
    let mut mu_y = 0.0;
    let mut p_sum = vec![0.0; 2 * l + 1];
    let mut p_diff = vec![0.0; l];
    for i in 1..=l {
        for j in 1..=l {
            let p = m.p(i, j);
            mu_x += i as f64 * p;
            mu_y += j as f64 * p;
            p_sum[i + j] += p;
            p_diff[i.abs_diff(j)] += p;
        }
    }
    let (mut var_x, mut var_y) = (0.0, 0.0);
    let (mut autocorr, mut prominence, mut shade, mut tendency, mut contrast) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut energy, mut max_p) = (0.0f64, 0.0f64);
    for i in 1..=l {
        for j in 1..=l {
            let p = m.p(i, j);
            let (fi, fj) = (i as f64, j as f64);
            var_x += (fi - mu_x).powi(2) * p;
            var_y += (fj - mu_y).powi(2) * p;
            autocorr += fi * fj * p;
            let c = fi + fj - mu_x - mu_y;
            prominence += c.powi(4) * p;
            shade += c.powi(3) * p;
            tendency += c.powi(2) * p;
            contrast += (fi - fj).powi(2) * p;
            energy += p * p;
            max_p = max_p.max(p);
        }
    }
    let (sd_x, sd_y) = (var_x.sqrt(), var_y.sqrt());
    let correlation = if sd_x * sd_y > 0.0 {
        (autocorr - mu_x * mu_y) / (sd_x * sd_y)
    } else {
        0.0
    };
    let diff_avg: f64 = p_diff.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
    let diff_var: f64 = p_diff.iter().enumerate().map(|(k, &p)| (k as f64 - diff_avg).powi(2) * p).sum();
    let lf = l as f64;
    let mut id = 0.0;
    let mut idm = 0.0;
    let mut idmn = 0.0;
    let mut idn = 0.0;
    let mut inv_var = 0.0;
    for (k, &p) in p_diff.iter().enumerate() {
        let k = k as f64;
        id += p / (1.0 + k);
        idm += p / (1.0 + k * k);
        idmn += p / (1.0 + k * k / (lf * lf));
        idn += p / (1.0 + k / lf);
        if k > 0.0 {
            inv_var += p / (k * k);
        }
    }
    let values = vec![
        autocorr,
        mu_x,
        prominence,
        shade,
        tendency,
        contrast,
        correlation,
        diff_avg,
        entropy2(p_diff.iter().copied()),
        diff_var,
        id,
        idm,
        idmn,
        idn,
        inv_var,
        energy,
        entropy2(m.probs.iter().copied()),
        max_p,
        entropy2(p_sum.iter().copied()),
        var_x,
    ];
    FeatureVector { names, values }
}
