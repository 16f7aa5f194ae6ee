//! Volume containers, DVOL file I/O, resampling and the synthetic phantom source.

mod dataset;
mod io;
mod phantom;
mod resample;

pub use dataset::{read_dataset, write_dataset, DatasetIndex, SampleRecord, TARGETS_FILE};
pub use io::{read_labels, read_volume, write_labels, write_volume, DTYPE_F32, DTYPE_I16, HEADER_LEN};
pub use phantom::{generate_phantom, morphology_from_labels, PhantomParams};
pub use resample::{crop, crop_labels, resize_labels_nearest, resize_trilinear};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (z, y, x); z varies slowest in memory.
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// Single-channel scalar field with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: Shape3, spacing: [f32; 3]) -> Result<Self> {
        Self::new(shape, spacing, vec![0.0; voxel_count(shape)])
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, [1.0; 3], vec![value; voxel_count(shape)])
    }

    pub fn from_fn(shape: Shape3, spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        check_shape(shape)?;
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, spacing, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_cubic(&self) -> bool {
        self.shape[0] == self.shape[1] && self.shape[1] == self.shape[2]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[flat_index(self.shape, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = flat_index(self.shape, z, y, x);
        self.data[i] = v;
    }

    /// Zero-mean, unit-variance over voxels where `support` is true; all other
    /// voxels are set to zero.
    pub fn normalize_over(&mut self, support: &[bool]) -> Result<()> {
        if support.len() != self.data.len() {
            return Err(Error::invalid("support mask length differs from volume"));
        }
        let n = support.iter().filter(|&&s| s).count();
        if n == 0 {
            return Err(Error::invalid("empty support mask"));
        }
        let mean = self
            .data
            .iter()
            .zip(support)
            .filter(|(_, &s)| s)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / n as f64;
        let var = self
            .data
            .iter()
            .zip(support)
            .filter(|(_, &s)| s)
            .map(|(&v, _)| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for (v, &s) in self.data.iter_mut().zip(support) {
            *v = if s { ((*v as f64 - mean) * inv) as f32 } else { 0.0 };
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("shape {shape:?} has a zero extent")));
    }
    Ok(())
}

/// Integer region labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParcellationMap {
    shape: Shape3,
    labels: Vec<u16>,
    num_regions: usize,
}

impl ParcellationMap {
    pub fn new(shape: Shape3, labels: Vec<u16>, num_regions: usize) -> Result<Self> {
        check_shape(shape)?;
        if labels.len() != voxel_count(shape) {
            return Err(Error::invalid("label length does not match shape"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_regions) {
            return Err(Error::invalid(format!(
                "label {bad} exceeds region count {num_regions}"
            )));
        }
        Ok(Self {
            shape,
            labels,
            num_regions,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[flat_index(self.shape, z, y, x)]
    }

    /// Sorted foreground ids that occur at least once.
    pub fn present_regions(&self) -> Vec<u16> {
        let mut seen = vec![false; self.num_regions + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=self.num_regions)
            .filter(|&r| seen[r])
            .map(|r| r as u16)
            .collect()
    }

    pub fn support(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Inclusive-exclusive bounding box of the foreground, as (origin, shape).
    pub fn support_bbox(&self) -> Option<(Shape3, Shape3)> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[2] {
                    if self.get(z, y, x) != 0 {
                        any = true;
                        for (a, v) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v + 1);
                        }
                    }
                }
            }
        }
        any.then(|| (lo, [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]))
    }
}

/// Per-region thickness proxies followed by curvature proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyTable {
    pub region_ids: Vec<u16>,
    pub values: Vec<f32>,
}

impl MorphologyTable {
    pub fn new(region_ids: Vec<u16>, values: Vec<f32>) -> Result<Self> {
        if values.len() != 2 * region_ids.len() {
            return Err(Error::invalid(format!(
                "morphology length {} is not 2x{} regions",
                values.len(),
                region_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite morphology value"));
        }
        Ok(Self { region_ids, values })
    }

    pub fn num_regions(&self) -> usize {
        self.region_ids.len()
    }
}

/// Texture features per tissue group, concatenated in group order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsTargets {
    pub values: Vec<f32>,
    /// Tissue group (1, 2 or 3) of each region id; index 0 is background and unused.
    pub tissue_groups: Vec<u8>,
}

impl RadiomicsTargets {
    pub fn features_per_group(&self) -> usize {
        self.values.len() / 3
    }
}

/// A volume with all pretext ground truth attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub volume: Volume,
    pub parcellation: ParcellationMap,
    pub morphology: MorphologyTable,
    pub radiomics: RadiomicsTargets,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.volume.shape() != self.parcellation.shape() {
            return Err(Error::invalid(format!(
                "sample {}: volume shape {:?} differs from label shape {:?}",
                self.sample_id,
                self.volume.shape(),
                self.parcellation.shape()
            )));
        }
        Ok(())
    }
}
