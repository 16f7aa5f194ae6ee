use super::{check_shape, flat_index, voxel_count, ParcellationMap, Shape3, Volume};
use crate::error::{Error, Result};

/// Corner-aligned source coordinate for each target index along one axis.
fn source_coords(src: usize, dst: usize) -> Vec<f64> {
    if dst == 1 {
        return vec![(src as f64 - 1.0) / 2.0];
    }
    let scale = (src as f64 - 1.0) / (dst as f64 - 1.0);
    (0..dst).map(|i| i as f64 * scale).collect()
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    source_coords(src, dst)
        .into_iter()
        .map(|c| {
            let lo = (c.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (c - lo as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Trilinear resize with corner-aligned sampling. Spacing is scaled so the
/// physical extent is preserved.
pub fn resize_trilinear(volume: &Volume, target: Shape3) -> Result<Volume> {
    check_shape(target)?;
    let src = volume.shape();
    let spacing = rescaled_spacing(volume.spacing(), src, target);
    if src == target {
        return Volume::new(target, spacing, volume.data().to_vec());
    }
    let [tz, ty, tx] = [axis_taps(src[0], target[0]), axis_taps(src[1], target[1]), axis_taps(src[2], target[2])];
    let d = volume.data();
    let mut out = Vec::with_capacity(voxel_count(target));
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let at = |z, y, x| d[flat_index(src, z, y, x)];
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), wx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), wx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), wx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), wx);
                out.push(lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz));
            }
        }
    }
    Volume::new(target, spacing, out)
}

fn rescaled_spacing(spacing: [f32; 3], src: Shape3, dst: Shape3) -> [f32; 3] {
    let mut s = spacing;
    for a in 0..3 {
        if src[a] != dst[a] {
            s[a] = spacing[a] * src[a] as f32 / dst[a] as f32;
        }
    }
    s
}

/// Nearest-neighbour resize for label maps, on the same sampling grid as
/// [`resize_trilinear`].
pub fn resize_labels_nearest(labels: &ParcellationMap, target: Shape3) -> Result<ParcellationMap> {
    check_shape(target)?;
    let src = labels.shape();
    if src == target {
        return Ok(labels.clone());
    }
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            source_coords(src[a], target[a])
                .into_iter()
                .map(|c| (c.round() as usize).min(src[a] - 1))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(voxel_count(target));
    for &z in &idx[0] {
        for &y in &idx[1] {
            for &x in &idx[2] {
                out.push(labels.get(z, y, x));
            }
        }
    }
    ParcellationMap::new(target, out, labels.num_regions())
}

fn check_box(full: Shape3, origin: Shape3, shape: Shape3) -> Result<()> {
    check_shape(shape)?;
    for a in 0..3 {
        if origin[a] + shape[a] > full[a] {
            return Err(Error::invalid(format!(
                "crop box origin {origin:?} shape {shape:?} exceeds bounds {full:?}"
            )));
        }
    }
    Ok(())
}

fn crop_raw<T: Copy>(data: &[T], full: Shape3, origin: Shape3, shape: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(shape));
    for z in origin[0]..origin[0] + shape[0] {
        for y in origin[1]..origin[1] + shape[1] {
            let row = flat_index(full, z, y, origin[2]);
            out.extend_from_slice(&data[row..row + shape[2]]);
        }
    }
    out
}

pub fn crop(volume: &Volume, origin: Shape3, shape: Shape3) -> Result<Volume> {
    check_box(volume.shape(), origin, shape)?;
    Volume::new(shape, volume.spacing(), crop_raw(volume.data(), volume.shape(), origin, shape))
}

pub fn crop_labels(labels: &ParcellationMap, origin: Shape3, shape: Shape3) -> Result<ParcellationMap> {
    check_box(labels.shape(), origin, shape)?;
    ParcellationMap::new(
        shape,
        crop_raw(labels.labels(), labels.shape(), origin, shape),
        labels.num_regions(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([56, 56, 56], 1.0).unwrap();
        let r = resize_trilinear(&v, [64, 64, 64]).unwrap();
        assert_eq!(r.shape(), [64, 64, 64]);
        assert!(r.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn identity_resize_is_bit_identical() {
        let v = Volume::from_fn([32, 32, 32], [1.0; 3], |z, y, x| ((z * 7 + y * 3 + x) % 11) as f32 * 0.37).unwrap();
        let r = resize_trilinear(&v, [32, 32, 32]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn linear_ramp_remains_linear() {
        let v = Volume::from_fn([2, 2, 8], [1.0; 3], |_, _, x| x as f32).unwrap();
        let r = resize_trilinear(&v, [2, 2, 16]).unwrap();
        for x in 0..16 {
            let expect = x as f32 * 7.0 / 15.0;
            assert!((r.get(1, 0, x) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn full_extent_crop_is_identity() {
        let v = Volume::from_fn([3, 4, 5], [1.0; 3], |z, y, x| (z * 20 + y * 5 + x) as f32).unwrap();
        assert_eq!(crop(&v, [0, 0, 0], [3, 4, 5]).unwrap(), v);
        let one = crop(&v, [0, 0, 0], [1, 1, 1]).unwrap();
        assert_eq!(one.data(), &[0.0]);
        let one = crop(&v, [2, 3, 4], [1, 1, 1]).unwrap();
        assert_eq!(one.data(), &[59.0]);
        assert!(crop(&v, [1, 0, 0], [3, 4, 5]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_input_no_overshoot(n in 2usize..10, m in 2usize..20, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed);
            let mut acc = 0.0f32;
            let steps: Vec<f32> = (0..n).map(|_| { acc += rng.gen_range(0.0..1.0); acc }).collect();
            let v = Volume::from_fn([2, 3, n], [1.0; 3], |_, _, x| steps[x]).unwrap();
            let r = resize_trilinear(&v, [3, 2, m]).unwrap();
            let (lo, hi) = v.min_max();
            let (rlo, rhi) = r.min_max();
            prop_assert!(rlo >= lo && rhi <= hi);
        }
    }
}
