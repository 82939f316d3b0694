//! Little-endian binary grid files.
//!
//! Deformation field (`MPAD`): magic, u32 version, u32 height, u32 width, then
//! `height × width` pairs of f32 `(u_x, u_y)`, row-major.
//!
//! Logit grid (`MPAL`): same layout with one f32 per pixel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::register::DeformationField;
use crate::tensor::Plane;

pub const FIELD_MAGIC: &[u8; 4] = b"MPAD";
pub const LOGITS_MAGIC: &[u8; 4] = b"MPAL";
pub const GRID_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

fn encode(magic: &[u8; 4], height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(magic: &[u8; 4], bytes: &[u8], per_pixel: usize) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("grid file shorter than its header".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {version}")));
    }
    let (height, width) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + height * width * per_pixel * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "grid payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((height, width, values))
}

pub fn encode_field(field: &DeformationField<f32>) -> Vec<u8> {
    encode(FIELD_MAGIC, field.height(), field.width(), field.data())
}

pub fn decode_field(bytes: &[u8]) -> Result<DeformationField<f32>> {
    let (h, w, v) = decode(FIELD_MAGIC, bytes, 2)?;
    DeformationField::new(h, w, v)
}

pub fn write_field(field: &DeformationField<f32>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_field(field))
}

pub fn read_field(path: &Path) -> Result<DeformationField<f32>> {
    decode_field(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_logits(logits: &Plane<f32>) -> Vec<u8> {
    encode(LOGITS_MAGIC, logits.height, logits.width, &logits.data)
}

pub fn decode_logits(bytes: &[u8]) -> Result<Plane<f32>> {
    let (height, width, data) = decode(LOGITS_MAGIC, bytes, 1)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit grid".into()));
    }
    Ok(Plane {
        height,
        width,
        data,
    })
}

pub fn write_logits(logits: &Plane<f32>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_logits(logits))
}

pub fn read_logits(path: &Path) -> Result<Plane<f32>> {
    decode_logits(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_layout_is_bit_exact() {
        let f = DeformationField::new(1, 2, vec![1.0f32, -2.0, 0.5, 3.25]).unwrap();
        let bytes = encode_field(&f);
        assert_eq!(&bytes[..4], b"MPAD");
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let f = DeformationField::<f32>::zeros(2, 2);
        let mut bytes = encode_field(&f);
        assert!(decode_field(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_logits(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_field(&bytes).is_err());
        assert!(decode_field(b"MPA").is_err());
    }

    proptest! {
        #[test]
        fn field_round_trip(h in 1usize..6, w in 1usize..6, seed in proptest::collection::vec(-100.0f32..100.0, 72)) {
            let data: Vec<f32> = seed.iter().copied().cycle().take(h * w * 2).collect();
            let f = DeformationField::new(h, w, data).unwrap();
            let bytes = encode_field(&f);
            let back = decode_field(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(encode_field(&back), bytes);
        }

        #[test]
        fn logits_round_trip(h in 1usize..6, w in 1usize..6, v in -20.0f32..20.0) {
            let p = Plane { height: h, width: w, data: (0..h * w).map(|i| v + i as f32 * 0.5).collect() };
            let back = decode_logits(&encode_logits(&p)).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
