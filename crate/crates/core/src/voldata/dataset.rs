//! Sample directories: one DVOL image and one DVOL label map per sample plus
//! a `targets.json` index holding the tabular targets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_labels, read_volume, write_labels, write_volume, MorphologyTable, RadiomicsTargets, Sample};
use crate::error::{Error, Result};

pub const TARGETS_FILE: &str = "targets.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image: String,
    pub labels: String,
    pub morphology: MorphologyTable,
    pub radiomics: RadiomicsTargets,
    /// Optional downstream label (class index or regression value).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub num_regions: usize,
    pub samples: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(TARGETS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Writes every sample and the index; `labels` optionally attaches a
/// downstream label per sample.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], labels: Option<&[f64]>) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(l) = labels {
        if l.len() != samples.len() {
            return Err(Error::invalid("one label per sample required"));
        }
    }
    let num_regions = samples.first().map_or(0, |s| s.parcellation.num_regions());
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let image = format!("{}.image.dvol", s.sample_id);
        let lab = format!("{}.labels.dvol", s.sample_id);
        write_volume(&s.volume, dir.join(&image))?;
        write_labels(&s.parcellation, s.volume.spacing(), dir.join(&lab))?;
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            image,
            labels: lab,
            morphology: s.morphology.clone(),
            radiomics: s.radiomics.clone(),
            label: labels.map(|l| l[i]),
        });
    }
    let index = DatasetIndex {
        num_regions,
        samples: records,
    };
    let path = dir.join(TARGETS_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Loads all samples in index order, with their downstream labels.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<Sample>, Vec<Option<f64>>)> {
    let dir = dir.as_ref();
    let index = DatasetIndex::load(dir)?;
    let resolve = |f: &str| -> PathBuf { dir.join(f) };
    let mut samples = Vec::with_capacity(index.samples.len());
    let mut labels = Vec::with_capacity(index.samples.len());
    for r in &index.samples {
        let sample = Sample {
            sample_id: r.sample_id.clone(),
            volume: read_volume(resolve(&r.image))?,
            parcellation: read_labels(resolve(&r.labels), Some(index.num_regions))?,
            morphology: MorphologyTable::new(r.morphology.region_ids.clone(), r.morphology.values.clone())?,
            radiomics: r.radiomics.clone(),
        };
        sample.validate()?;
        samples.push(sample);
        labels.push(r.label);
    }
    Ok((samples, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voldata::{generate_phantom, PhantomParams};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..2).map(|s| generate_phantom(PhantomParams::new(s, 32, 6)).unwrap()).collect();
        write_dataset(dir.path(), &samples, Some(&[0.0, 1.0])).unwrap();
        let (back, labels) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
        assert_eq!(labels, vec![Some(0.0), Some(1.0)]);
    }
}
