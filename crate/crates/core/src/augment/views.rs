use rand::Rng;

use super::{intensity_jitter, make_location_task, make_mim_mask, rotate90, rotate_labels, LocationTaskSpec, MimMask, RotationSpec, ViewGeometry, NUM_ROTATIONS};
use crate::error::{Error, Result};
use crate::voldata::{crop, crop_labels, resize_labels_nearest, resize_trilinear, ParcellationMap, Sample, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

/// One augmentation of a view with its per-view targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    /// Encoder input; masked voxels are zero.
    pub input: Volume,
    /// The augmented view before masking (reconstruction target).
    pub target: Volume,
    pub labels: ParcellationMap,
    pub rotation: RotationSpec,
    pub jitter: (f32, f32),
    pub mask: Option<MimMask>,
    pub present_regions: Vec<u16>,
}

/// A source view and its two augmentations; exactly one of them is masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub kind: ViewKind,
    pub augs: [AugmentedView; 2],
    /// Location sub-patches drawn from the unmasked augmentation (local views only).
    pub location: Vec<LocationTaskSpec>,
}

impl ViewPair {
    pub fn unmasked(&self) -> &AugmentedView {
        self.augs.iter().find(|a| a.mask.is_none()).expect("one augmentation is unmasked")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub sample_id: String,
    pub global: ViewPair,
    pub locals: Vec<ViewPair>,
    pub morphology: Vec<f32>,
    /// Region id of each morphology entry within one half of `morphology`.
    pub morphology_regions: Vec<u16>,
    pub radiomics: Vec<f32>,
    pub tissue_groups: Vec<u8>,
}

impl ViewSet {
    pub fn pairs(&self) -> impl Iterator<Item = &ViewPair> {
        std::iter::once(&self.global).chain(self.locals.iter())
    }

    pub fn views(&self) -> impl Iterator<Item = &AugmentedView> {
        self.pairs().flat_map(|p| p.augs.iter())
    }
}

fn augment(view: &Volume, labels: &ParcellationMap, masked: bool, rng: &mut impl Rng, g: &ViewGeometry) -> Result<AugmentedView> {
    let rotation = RotationSpec::from_class(rng.gen_range(0..NUM_ROTATIONS as u8))?;
    let rotated = rotate90(view, rotation)?;
    let labels = rotate_labels(labels, rotation)?;
    let (target, jitter) = intensity_jitter(&rotated, rng, g);
    let (input, mask) = if masked {
        let m = make_mim_mask(target.shape(), g.mask_patch, g.mask_ratio, rng)?;
        (m.apply(&target)?, Some(m))
    } else {
        (target.clone(), None)
    };
    Ok(AugmentedView {
        input,
        present_regions: labels.present_regions(),
        target,
        labels,
        rotation,
        jitter,
        mask,
    })
}

fn pair(kind: ViewKind, view: Volume, labels: ParcellationMap, rng: &mut impl Rng, g: &ViewGeometry) -> Result<ViewPair> {
    let first = augment(&view, &labels, false, rng, g)?;
    let second = augment(&view, &labels, true, rng, g)?;
    let location = match kind {
        ViewKind::Local => make_location_task(&first.target, rng, g.sub_patch_size, g.max_gap)?,
        ViewKind::Global => Vec::new(),
    };
    Ok(ViewPair {
        kind,
        augs: [first, second],
        location,
    })
}

/// One global and `num_local` local views, each augmented twice.
pub fn build_views(sample: &Sample, rng: &mut impl Rng, g: &ViewGeometry) -> Result<ViewSet> {
    sample.validate()?;
    g.validate()?;
    let (lo, extent) = sample
        .parcellation
        .support_bbox()
        .ok_or_else(|| Error::invalid("sample has no foreground"))?;
    if extent.iter().any(|&e| e < g.local_crop) {
        return Err(Error::invalid(format!(
            "local crop {} larger than support bounding box {extent:?}",
            g.local_crop
        )));
    }

    let gshape = [g.global_size; 3];
    let gvol = resize_trilinear(&crop(&sample.volume, lo, extent)?, gshape)?;
    let glab = resize_labels_nearest(&crop_labels(&sample.parcellation, lo, extent)?, gshape)?;
    let global = pair(ViewKind::Global, gvol, glab, rng, g)?;

    let support: Vec<usize> = sample
        .parcellation
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| i)
        .collect();
    let shape = sample.volume.shape();
    let c = g.local_crop;
    let mut locals = Vec::with_capacity(g.num_local);
    for _ in 0..g.num_local {
        let centre = support[rng.gen_range(0..support.len())];
        let p = [centre / (shape[1] * shape[2]), (centre / shape[2]) % shape[1], centre % shape[2]];
        let origin: [usize; 3] = std::array::from_fn(|a| {
            let want = p[a].saturating_sub(c / 2);
            want.clamp(lo[a], lo[a] + extent[a] - c)
        });
        let lshape = [g.local_size; 3];
        let lvol = resize_trilinear(&crop(&sample.volume, origin, [c; 3])?, lshape)?;
        let llab = resize_labels_nearest(&crop_labels(&sample.parcellation, origin, [c; 3])?, lshape)?;
        locals.push(pair(ViewKind::Local, lvol, llab, rng, g)?);
    }

    Ok(ViewSet {
        sample_id: sample.sample_id.clone(),
        global,
        locals,
        morphology: sample.morphology.values.clone(),
        morphology_regions: sample.morphology.region_ids.clone(),
        radiomics: sample.radiomics.values.clone(),
        tissue_groups: sample.radiomics.tissue_groups.clone(),
    })
}
