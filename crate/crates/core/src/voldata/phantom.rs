//! Deterministic synthetic brain phantoms.
//!
//! An egg-shaped support is split into `K` Voronoi regions whose sites jitter
//! around a fixed template layout, so region `k` sits in roughly the same
//! place in every phantom. Each region gets its own base intensity and a
//! band-limited value-noise texture with a region-specific correlation length.
//! A weak linear intensity trend with distinct per-axis slopes gives the
//! volume a canonical orientation.

use rand::Rng;

use super::{voxel_count, MorphologyTable, ParcellationMap, RadiomicsTargets, Sample, Shape3, Volume};
use crate::error::{Error, Result};
use crate::radiomics::{region_features, DEFAULT_LEVELS, NUM_GROUPS};
use crate::rng;

pub const MIN_SIZE: usize = 32;
pub const MAX_REGIONS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    pub seed: u64,
    pub size: usize,
    pub num_regions: usize,
    pub spacing: f32,
    pub levels: usize,
}

impl PhantomParams {
    pub fn new(seed: u64, size: usize, num_regions: usize) -> Self {
        Self {
            seed,
            size,
            num_regions,
            spacing: 1.25,
            levels: DEFAULT_LEVELS,
        }
    }
}

// Semi-axes as fractions of the volume side, for the negative and positive
// half of each axis (z, y, x).
const RADII: [[f64; 2]; 3] = [[0.36, 0.45], [0.33, 0.40], [0.30, 0.42]];
const TREND: [f64; 3] = [0.5, 0.3, 0.18];
const GROUP_LEVEL: [f64; 3] = [1.0, 0.55, 0.15];
const TEMPLATE_SEED: u64 = 0x7e3a_51c0_ffee_d00d;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice_value(seed: u64, region: u16, p: [i64; 3]) -> f64 {
    let mut h = splitmix(seed ^ (region as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    for c in p {
        h = splitmix(h ^ c as u64);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Trilinear value noise on a lattice with spacing `corr` voxels.
fn value_noise(seed: u64, region: u16, pos: [f64; 3], corr: f64) -> f64 {
    let q = [pos[0] / corr, pos[1] / corr, pos[2] / corr];
    let base = [q[0].floor() as i64, q[1].floor() as i64, q[2].floor() as i64];
    let t = [q[0] - base[0] as f64, q[1] - base[1] as f64, q[2] - base[2] as f64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if o[a] == 1 { t[a] } else { 1.0 - t[a] };
        }
        acc += w * lattice_value(seed, region, [base[0] + o[0], base[1] + o[1], base[2] + o[2]]);
    }
    acc
}

fn golden(i: usize, k: f64) -> f64 {
    (i as f64 * k).fract()
}

fn in_support(p: [f64; 3], center: f64, radii: &[[f64; 2]; 3]) -> bool {
    let mut r = 0.0;
    for a in 0..3 {
        let d = p[a] - center;
        let s = if d < 0.0 { radii[a][0] } else { radii[a][1] };
        r += (d / s).powi(2);
    }
    r <= 1.0
}

/// Region id -> tissue group (1, 2, 3), assigned round-robin; index 0 unused.
pub fn tissue_groups(num_regions: usize) -> Vec<u8> {
    std::iter::once(0)
        .chain((0..num_regions).map(|r| (r % NUM_GROUPS) as u8 + 1))
        .collect()
}

pub fn generate_phantom(params: PhantomParams) -> Result<Sample> {
    let PhantomParams {
        seed,
        size,
        num_regions: k,
        spacing,
        levels,
    } = params;
    if size < MIN_SIZE {
        return Err(Error::invalid(format!("phantom size {size} below {MIN_SIZE}")));
    }
    if !(4..=MAX_REGIONS).contains(&k) {
        return Err(Error::invalid(format!("region count {k} outside 4..={MAX_REGIONS}")));
    }
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let mut rng = rng::derive(seed, "phantom");

    let mut radii = [[0.0; 2]; 3];
    for a in 0..3 {
        for h in 0..2 {
            radii[a][h] = RADII[a][h] * s * rng.gen_range(0.97..1.03);
        }
    }
    let shape: Shape3 = [size; 3];
    let support: Vec<bool> = (0..voxel_count(shape))
        .map(|i| in_support([(i / (size * size)) as f64, ((i / size) % size) as f64, (i % size) as f64], center, &radii))
        .collect();
    let n_support = support.iter().filter(|&&b| b).count();
    if k > n_support {
        return Err(Error::invalid(format!(
            "{k} regions requested but support has {n_support} voxels"
        )));
    }

    // Template sites depend only on (K, size); the sample seed only jitters them.
    let mut template = rng::derive(TEMPLATE_SEED, &format!("sites-{k}-{size}"));
    let shrunk: [[f64; 2]; 3] = std::array::from_fn(|a| [RADII[a][0] * s * 0.8, RADII[a][1] * s * 0.8]);
    let mut sites = Vec::with_capacity(k);
    while sites.len() < k {
        let p: [f64; 3] = std::array::from_fn(|_| template.gen_range(0.0..s - 1.0));
        if in_support(p, center, &shrunk) {
            sites.push(p);
        }
    }
    let jitter = 0.04 * s;
    for site in &mut sites {
        loop {
            let cand: [f64; 3] = std::array::from_fn(|a| site[a] + rng.gen_range(-jitter..jitter));
            if in_support(cand, center, &radii) {
                *site = cand;
                break;
            }
        }
    }

    let mut labels = vec![0u16; voxel_count(shape)];
    for (i, lab) in labels.iter_mut().enumerate() {
        if !support[i] {
            continue;
        }
        let p = [(i / (size * size)) as f64, ((i / size) % size) as f64, (i % size) as f64];
        let mut best = (f64::INFINITY, 0usize);
        for (r, site) in sites.iter().enumerate() {
            let d = (0..3).map(|a| (p[a] - site[a]).powi(2)).sum::<f64>();
            if d < best.0 {
                best = (d, r);
            }
        }
        *lab = best.1 as u16 + 1;
    }

    let groups = tissue_groups(k);
    let base: Vec<f64> = (0..=k)
        .map(|r| {
            if r == 0 {
                return 0.0;
            }
            let g = groups[r] as usize - 1;
            GROUP_LEVEL[g] + 0.25 * (golden(r, 0.618_034) - 0.5) + rng.gen_range(-0.03..0.03)
        })
        .collect();
    let corr: Vec<f64> = (0..=k).map(|r| 1.5 + 3.5 * golden(r, 0.381_966)).collect();
    let amp: Vec<f64> = (0..=k).map(|r| 0.05 + 0.08 * golden(r + 7, 0.754_877)).collect();
    let noise_seed = rng.gen::<u64>();

    let mut data = vec![0f32; voxel_count(shape)];
    for (i, v) in data.iter_mut().enumerate() {
        let r = labels[i];
        if r == 0 {
            continue;
        }
        let p = [(i / (size * size)) as f64, ((i / size) % size) as f64, (i % size) as f64];
        let trend: f64 = (0..3).map(|a| TREND[a] * (p[a] - center) / (s / 2.0)).sum();
        let tex = amp[r as usize] * value_noise(noise_seed, r, p, corr[r as usize]);
        *v = (base[r as usize] + 0.35 * trend + tex) as f32;
    }
    let mut volume = Volume::new(shape, [spacing; 3], data)?;
    volume.normalize_over(&support)?;
    let parcellation = ParcellationMap::new(shape, labels, k)?;
    let morphology = morphology_from_labels(&parcellation, [spacing; 3])?;
    let raw = region_features(&volume, &parcellation, &groups, levels)?;
    Ok(Sample {
        sample_id: format!("phantom-{seed:06}"),
        volume,
        parcellation,
        morphology,
        radiomics: RadiomicsTargets {
            values: raw.into_iter().map(|v| v as f32).collect(),
            tissue_groups: groups,
        },
    })
}

/// Per-region equivalent-sphere diameter (mm) followed by surface-to-volume
/// ratio (1/mm). Absent regions get zeros.
pub fn morphology_from_labels(labels: &ParcellationMap, spacing: [f32; 3]) -> Result<MorphologyTable> {
    let k = labels.num_regions();
    let shape = labels.shape();
    let voxel_mm3 = (spacing[0] * spacing[1] * spacing[2]) as f64;
    // Face areas orthogonal to z, y, x.
    let face = [
        (spacing[1] * spacing[2]) as f64,
        (spacing[0] * spacing[2]) as f64,
        (spacing[0] * spacing[1]) as f64,
    ];
    let mut count = vec![0u64; k + 1];
    let mut area = vec![0f64; k + 1];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let r = labels.get(z, y, x);
                if r == 0 {
                    continue;
                }
                count[r as usize] += 1;
                let p = [z as i64, y as i64, x as i64];
                for a in 0..3 {
                    for d in [-1i64, 1] {
                        let mut q = p;
                        q[a] += d;
                        let outside = q[a] < 0 || q[a] >= shape[a] as i64;
                        if outside || labels.get(q[0] as usize, q[1] as usize, q[2] as usize) != r {
                            area[r as usize] += face[a];
                        }
                    }
                }
            }
        }
    }
    let mut thickness = Vec::with_capacity(k);
    let mut curvature = Vec::with_capacity(k);
    for r in 1..=k {
        let vol = count[r] as f64 * voxel_mm3;
        if vol == 0.0 {
            thickness.push(0.0);
            curvature.push(0.0);
        } else {
            thickness.push((6.0 * vol / std::f64::consts::PI).cbrt() as f32);
            curvature.push((area[r] / vol) as f32);
        }
    }
    thickness.extend(curvature);
    MorphologyTable::new((1..=k as u16).collect(), thickness)
}
