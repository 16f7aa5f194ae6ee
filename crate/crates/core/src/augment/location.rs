use rand::Rng;

use crate::error::{Error, Result};
use crate::voldata::{crop, resize_trilinear, Shape3, Volume};

pub const NUM_OCTANTS: usize = 8;

/// One sub-patch of the location task.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTaskSpec {
    /// `4*bz + 2*by + bx` for the octant's binary coordinates.
    pub octant_id: u8,
    pub origin: Shape3,
    /// Distance from the view centre to the sub-patch, per axis.
    pub gap: Shape3,
    pub sub_patch: Volume,
}

impl LocationTaskSpec {
    pub fn size(&self) -> usize {
        self.sub_patch.shape()[0]
    }
}

/// Splits a cubic view into 2x2x2 octants and samples one sub-patch per octant,
/// offset from the view centre by an independent gap in `0..=max_gap` per axis.
pub fn make_location_task(
    view: &Volume,
    rng: &mut impl Rng,
    sub_patch_size: usize,
    max_gap: usize,
) -> Result<Vec<LocationTaskSpec>> {
    if !view.is_cubic() {
        return Err(Error::invalid("location task needs a cubic view"));
    }
    let side = view.shape()[0];
    let half = side / 2;
    if sub_patch_size == 0 || sub_patch_size + max_gap > half {
        return Err(Error::invalid(format!(
            "sub-patch {sub_patch_size} with gap {max_gap} does not fit twice in side {side}"
        )));
    }
    (0..NUM_OCTANTS as u8)
        .map(|octant| {
            let bits = [(octant >> 2) & 1, (octant >> 1) & 1, octant & 1];
            let mut gap = [0usize; 3];
            let mut origin = [0usize; 3];
            for a in 0..3 {
                gap[a] = rng.gen_range(0..=max_gap);
                origin[a] = if bits[a] == 0 {
                    half - gap[a] - sub_patch_size
                } else {
                    side - half + gap[a]
                };
            }
            Ok(LocationTaskSpec {
                octant_id: octant,
                origin,
                gap,
                sub_patch: crop(view, origin, [sub_patch_size; 3])?,
            })
        })
        .collect()
}

/// Encoder input for one sub-patch: the view with everything outside the
/// sub-patch box zeroed, resized to `size`. The patch keeps its place in the
/// view frame, which is what the octant label refers to.
pub fn location_input(view: &Volume, spec: &LocationTaskSpec, size: usize) -> Result<Volume> {
    let s = view.shape();
    let n = spec.size();
    let mut canvas = Volume::zeros(s, view.spacing())?;
    for z in spec.origin[0]..spec.origin[0] + n {
        for y in spec.origin[1]..spec.origin[1] + n {
            for x in spec.origin[2]..spec.origin[2] + n {
                canvas.set(z, y, x, view.get(z, y, x));
            }
        }
    }
    resize_trilinear(&canvas, [size; 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disjoint(a: &LocationTaskSpec, b: &LocationTaskSpec) -> bool {
        (0..3).any(|k| a.origin[k] + a.size() <= b.origin[k] || b.origin[k] + b.size() <= a.origin[k])
    }

    #[test]
    fn defaults_give_disjoint_boxes_one_per_octant() {
        let view = Volume::zeros([64; 3], [1.0; 3]).unwrap();
        let mut rng = crate::rng::stream(11);
        let specs = make_location_task(&view, &mut rng, 24, 8).unwrap();
        let mut ids: Vec<u8> = specs.iter().map(|s| s.octant_id).collect();
        ids.sort();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        for (i, a) in specs.iter().enumerate() {
            for b in &specs[i + 1..] {
                assert!(disjoint(a, b));
            }
        }
    }

    #[test]
    fn zero_gap_tiles_the_view() {
        let view = Volume::from_fn([64; 3], [1.0; 3], |z, y, x| (z + y + x) as f32).unwrap();
        let mut rng = crate::rng::stream(0);
        let specs = make_location_task(&view, &mut rng, 32, 0).unwrap();
        let mut covered = vec![0u8; 64 * 64 * 64];
        for s in &specs {
            let b = [s.octant_id >> 2 & 1, s.octant_id >> 1 & 1, s.octant_id & 1];
            for a in 0..3 {
                assert_eq!(s.origin[a], 32 * b[a] as usize);
            }
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        covered[((s.origin[0] + z) * 64 + s.origin[1] + y) * 64 + s.origin[2] + x] += 1;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn oversized_patch_rejected() {
        let view = Volume::zeros([64; 3], [1.0; 3]).unwrap();
        let mut rng = crate::rng::stream(0);
        assert!(make_location_task(&view, &mut rng, 28, 8).is_err());
    }

    #[test]
    fn location_input_keeps_only_the_box() {
        let view = Volume::filled([32; 3], 1.0).unwrap();
        let mut rng = crate::rng::stream(2);
        let specs = make_location_task(&view, &mut rng, 12, 4).unwrap();
        let inp = location_input(&view, &specs[5], 32).unwrap();
        let ones = inp.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 12 * 12 * 12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]
        #[test]
        fn boxes_disjoint_for_all_draws(seed in 0u64..1_000_000) {
            let view = Volume::zeros([64; 3], [1.0; 3]).unwrap();
            let mut rng = crate::rng::stream(seed);
            let specs = make_location_task(&view, &mut rng, 24, 8).unwrap();
            for (i, a) in specs.iter().enumerate() {
                for b in &specs[i + 1..] {
                    proptest::prop_assert!(disjoint(a, b));
                }
            }
        }
    }
}
