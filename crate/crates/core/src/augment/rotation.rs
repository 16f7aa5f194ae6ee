use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voldata::{ParcellationMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    None,
    X,
    Y,
    Z,
}

/// One of the 10 rotation classes: identity plus 1-3 quarter turns about
/// x, y or z. Turns are counterclockwise seen from the positive end of the
/// axis, in a right-handed (x, y, z) frame over arrays indexed `[z][y][x]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotationSpec {
    pub class_id: u8,
    pub axis: Axis,
    pub quarter_turns: u8,
}

pub const NUM_ROTATIONS: usize = 10;

impl RotationSpec {
    pub const IDENTITY: RotationSpec = RotationSpec {
        class_id: 0,
        axis: Axis::None,
        quarter_turns: 0,
    };

    pub fn from_class(class_id: u8) -> Result<Self> {
        if class_id == 0 {
            return Ok(Self::IDENTITY);
        }
        if class_id as usize >= NUM_ROTATIONS {
            return Err(Error::invalid(format!("rotation class {class_id} outside 0..10")));
        }
        let axis = match (class_id - 1) / 3 {
            0 => Axis::X,
            1 => Axis::Y,
            _ => Axis::Z,
        };
        Ok(Self {
            class_id,
            axis,
            quarter_turns: (class_id - 1) % 3 + 1,
        })
    }

    pub fn from_axis(axis: Axis, quarter_turns: u8) -> Self {
        let turns = quarter_turns % 4;
        let block = match axis {
            Axis::None => return Self::IDENTITY,
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        };
        if turns == 0 {
            return Self::IDENTITY;
        }
        Self {
            class_id: 1 + 3 * block + turns - 1,
            axis,
            quarter_turns: turns,
        }
    }

    pub fn inverse(self) -> Self {
        Self::from_axis(self.axis, (4 - self.quarter_turns) % 4)
    }

    pub fn all() -> impl Iterator<Item = RotationSpec> {
        (0..NUM_ROTATIONS as u8).map(|c| Self::from_class(c).unwrap())
    }
}

/// Rotates a cubic array of side `n` by one quarter turn; returns the new array.
fn quarter_turn<T: Copy>(src: &[T], n: usize, axis: Axis) -> Vec<T> {
    let idx = |z: usize, y: usize, x: usize| (z * n + y) * n + x;
    let mut out = Vec::with_capacity(src.len());
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let v = match axis {
                    // y' = -z, z' = y
                    Axis::X => src[idx(n - 1 - b, a, c)],
                    // x' = z, z' = -x
                    Axis::Y => src[idx(c, b, n - 1 - a)],
                    // x' = -y, y' = x
                    Axis::Z => src[idx(a, n - 1 - c, b)],
                    Axis::None => src[idx(a, b, c)],
                };
                out.push(v);
            }
        }
    }
    out
}

pub(crate) fn rotate_array<T: Copy>(data: &[T], n: usize, spec: RotationSpec) -> Vec<T> {
    let mut cur = data.to_vec();
    for _ in 0..spec.quarter_turns {
        cur = quarter_turn(&cur, n, spec.axis);
    }
    cur
}

/// Exact axis-aligned rotation of a cubic volume.
pub fn rotate90(volume: &Volume, spec: RotationSpec) -> Result<Volume> {
    if !volume.is_cubic() {
        return Err(Error::invalid(format!("rotation needs a cubic volume, got {:?}", volume.shape())));
    }
    let n = volume.shape()[0];
    Volume::new(volume.shape(), volume.spacing(), rotate_array(volume.data(), n, spec))
}

pub fn rotate_labels(labels: &ParcellationMap, spec: RotationSpec) -> Result<ParcellationMap> {
    let s = labels.shape();
    if s[0] != s[1] || s[1] != s[2] {
        return Err(Error::invalid("rotation needs cubic labels"));
    }
    ParcellationMap::new(s, rotate_array(labels.labels(), s[0], spec), labels.num_regions())
}
