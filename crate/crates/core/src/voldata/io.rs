//! DVOL: a minimal little-endian volume container.
//!
//! ```text
//! 0..4    magic "DVOL"
//! 4       version (1)
//! 5       dtype (1 = float32, 2 = int16)
//! 6..8    reserved, zero
//! 8..20   dims D, H, W as u32
//! 20..32  spacing as f32 x3
//! 32..    payload, z slowest
//! ```

use std::fs;
use std::path::Path;

use super::{voxel_count, ParcellationMap, Shape3, Volume};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVOL";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_I16: u8 = 2;
pub const HEADER_LEN: usize = 32;

struct Header {
    dtype: u8,
    shape: Shape3,
    spacing: [f32; 3],
}

fn encode_header(dtype: u8, shape: Shape3, spacing: [f32; 3]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.extend_from_slice(&[0, 0]);
    for d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("magic", format!("{:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("version", format!("{}", bytes[4])));
    }
    let dtype = bytes[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_I16 {
        return Err(Error::format("dtype", format!("unsupported code {dtype}")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::format("reserved", "nonzero reserved bytes"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let shape = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::format("shape", format!("{shape:?} has a zero extent")));
    }
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    Ok(Header {
        dtype,
        shape,
        spacing,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, elem: usize) -> Result<&'a [u8]> {
    let n = voxel_count(header.shape)
        .checked_mul(elem)
        .ok_or_else(|| Error::format("shape", "voxel count overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n {
        return Err(Error::format(
            "payload length",
            format!("expected {n} bytes, found {}", body.len()),
        ));
    }
    Ok(body)
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    let mut out = encode_header(DTYPE_F32, volume.shape(), volume.spacing())?;
    out.reserve(volume.len() * 4);
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let header = decode_header(bytes)?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::format("dtype", "expected float32 volume"));
    }
    let body = payload(bytes, &header, 4)?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(header.shape, header.spacing, data)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(volume)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Labels are stored as int16 with unit spacing unless a spacing is given.
pub fn write_labels(labels: &ParcellationMap, spacing: [f32; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = encode_header(DTYPE_I16, labels.shape(), spacing)?;
    for &l in labels.labels() {
        let v = i16::try_from(l).map_err(|_| Error::invalid("label exceeds int16"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a label map; the region count is taken as the largest label present
/// unless `num_regions` is given.
pub fn read_labels(path: impl AsRef<Path>, num_regions: Option<usize>) -> Result<ParcellationMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = decode_header(&bytes)?;
    if header.dtype != DTYPE_I16 {
        return Err(Error::format("dtype", "expected int16 labels"));
    }
    let body = payload(&bytes, &header, 2)?;
    let mut labels = Vec::with_capacity(body.len() / 2);
    for c in body.chunks_exact(2) {
        let v = i16::from_le_bytes([c[0], c[1]]);
        if v < 0 {
            return Err(Error::format("payload", format!("negative label {v}")));
        }
        labels.push(v as u16);
    }
    let k = num_regions.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize);
    ParcellationMap::new(header.shape, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn field(err: Error) -> &'static str {
        match err {
            Error::Format { field, .. } => field,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn random_volume_round_trips() {
        let mut rng = crate::rng::stream(3);
        let v = Volume::from_fn([16, 16, 16], [1.25; 3], |_, _, _| rng.gen_range(-3.0..3.0)).unwrap();
        let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
        assert_eq!(v, back);
        assert!(v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_volume_file_size() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(encode_volume(&v).unwrap().len(), HEADER_LEN + 64 * 4);
        assert_eq!(HEADER_LEN, 32);
    }

    #[test]
    fn header_echoes_spacing() {
        let v = Volume::zeros([2, 2, 2], [1.25; 3]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        for k in 0..3 {
            let o = 20 + 4 * k;
            assert_eq!(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()), 1.25);
        }
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([3, 5, 7], [1.0; 3], |z, y, x| (z + 2 * y + 3 * x) as f32 * 0.1).unwrap();
        let (a, b) = (dir.path().join("a.dvol"), dir.path().join("b.dvol"));
        write_volume(&v, &a).unwrap();
        write_volume(&v, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_volume(&a).unwrap(), v);
    }

    #[test]
    fn truncated_payload() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert_eq!(field(decode_volume(&bytes).unwrap_err()), "payload length");
    }

    #[test]
    fn zero_dimension_in_header() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(field(decode_volume(&bytes).unwrap_err()), "shape");
    }

    #[test]
    fn bad_magic_and_dtype() {
        let v = Volume::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes[0] = b'X';
        assert_eq!(field(decode_volume(&bytes).unwrap_err()), "magic");
        let mut bytes = encode_volume(&v).unwrap();
        bytes[5] = 9;
        assert_eq!(field(decode_volume(&bytes).unwrap_err()), "dtype");
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = ParcellationMap::new([2, 2, 3], vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 0, 1, 2], 8).unwrap();
        let p = dir.path().join("l.dvol");
        write_labels(&labels, [1.0; 3], &p).unwrap();
        assert_eq!(read_labels(&p, Some(8)).unwrap(), labels);
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, HEADER_LEN + 12 * 2);
        assert!(matches!(read_volume(&p), Err(Error::Format { field: "dtype", .. })));
    }
}
