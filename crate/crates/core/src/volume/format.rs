//! `PVOL1` container: one compact JSON header line, a newline, then the raw
//! little-endian payload in `C, D, H, W` row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_spacing, Dims3, MaskVolume, PredictionVolume, Spacing, Volume};
use crate::error::{Error, Result};
use crate::nn::Shape4;

pub const MAGIC: &str = "PVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvolHeader {
    pub magic: String,
    pub dims: [usize; 4],
    pub dtype: Dtype,
    pub spacing: Spacing,
    #[serde(default)]
    pub modality: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32Le,
            Payload::U8(_) => Dtype::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

/// Serialise a header and payload into container bytes.
pub fn write_pvol(header: &PvolHeader, payload: &Payload) -> Result<Vec<u8>> {
    if header.dtype != payload.dtype() {
        return Err(Error::Format("header dtype does not match payload".into()));
    }
    if header.dims.iter().product::<usize>() != payload.len() {
        return Err(Error::Format(format!(
            "header dims {:?} do not match {} payload values",
            header.dims,
            payload.len()
        )));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    match payload {
        Payload::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Parse container bytes. Checks magic and payload size; spacing validity is
/// left to the typed readers.
pub fn read_pvol(bytes: &[u8]) -> Result<(PvolHeader, Payload)> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header: PvolHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    let body = &bytes[nl + 1..];
    let count: usize = header.dims.iter().product();
    let expected = count * header.dtype.width();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "header dims {:?} need {expected} payload bytes, found {}",
            header.dims,
            body.len()
        )));
    }
    let payload = match header.dtype {
        Dtype::F32Le => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => Payload::U8(body.to_vec()),
    };
    Ok((header, payload))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let header = PvolHeader {
        magic: MAGIC.into(),
        dims: v.shape.dims(),
        dtype: Dtype::F32Le,
        spacing: v.spacing,
        modality: v.modality_tags.clone(),
    };
    write_pvol(&header, &Payload::F32(v.data.clone()))
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (h, payload) = read_pvol(bytes)?;
    let Payload::F32(data) = payload else {
        return Err(Error::Format("image volumes must be f32le".into()));
    };
    let [c, d, hh, w] = h.dims;
    Volume::new(Shape4::new(c, d, hh, w), data, h.spacing, h.modality)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v)?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn encode_mask(m: &MaskVolume) -> Result<Vec<u8>> {
    let header = PvolHeader {
        magic: MAGIC.into(),
        dims: [1, m.dims.d, m.dims.h, m.dims.w],
        dtype: Dtype::U8,
        spacing: m.spacing,
        modality: vec!["MASK".into()],
    };
    write_pvol(&header, &Payload::U8(m.data.iter().map(|b| *b as u8).collect()))
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let (h, payload) = read_pvol(bytes)?;
    let Payload::U8(data) = payload else {
        return Err(Error::Format("masks must be u8".into()));
    };
    if h.dims[0] != 1 {
        return Err(Error::Format("masks have a single channel".into()));
    }
    if data.iter().any(|v| *v > 1) {
        return Err(Error::Validation("mask values must be 0 or 1".into()));
    }
    check_spacing(h.spacing)?;
    MaskVolume::new(
        Dims3::new(h.dims[1], h.dims[2], h.dims[3]),
        data.into_iter().map(|v| v == 1).collect(),
        h.spacing,
    )
}

pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    decode_mask(&fs::read(path)?)
}

pub fn encode_prediction(p: &PredictionVolume, spacing: Spacing) -> Result<Vec<u8>> {
    let header = PvolHeader {
        magic: MAGIC.into(),
        dims: [1, p.dims.d, p.dims.h, p.dims.w],
        dtype: Dtype::F32Le,
        spacing,
        modality: vec!["PROB".into()],
    };
    write_pvol(&header, &Payload::F32(p.prob.clone()))
}

pub fn save_prediction(p: &PredictionVolume, spacing: Spacing, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_prediction(p, spacing)?)
}

pub fn load_prediction(path: impl AsRef<Path>) -> Result<PredictionVolume> {
    let (h, payload) = read_pvol(&fs::read(path)?)?;
    let Payload::F32(prob) = payload else {
        return Err(Error::Format("predictions must be f32le".into()));
    };
    PredictionVolume::new(Dims3::new(h.dims[1], h.dims[2], h.dims[3]), prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dims: [usize; 4], spacing: Spacing) -> Vec<u8> {
        let mut out = serde_json::to_vec(&PvolHeader {
            magic: MAGIC.into(),
            dims,
            dtype: Dtype::F32Le,
            spacing,
            modality: vec!["CT".into()],
        })
        .unwrap();
        out.push(b'\n');
        out
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let mut bytes = header([1, 2, 2, 2], [1.0; 3]);
        bytes.extend(std::iter::repeat(0u8).take(7 * 4));
        assert!(matches!(decode_volume(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn negative_spacing_is_a_validation_error() {
        let mut bytes = header([1, 1, 1, 1], [-1.0, 1.0, 1.0]);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(decode_volume(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"{\"magic\":\"NOPE\",\"dims\":[1,1,1,1],\"dtype\":\"u8\",\"spacing\":[1,1,1]}\n\x00";
        assert!(matches!(read_pvol(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mask_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = MaskVolume::new(Dims3::new(2, 2, 2), vec![true, false, false, true, true, true, false, false], [2.5, 1.0, 1.0]).unwrap();
        let p = dir.path().join("m.pvol");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn volume_roundtrip_is_bit_exact(
            c in 1usize..=2, d in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in any::<u64>(),
            sz in 0.1f64..5.0,
        ) {
            let n = c * d * h * w;
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(((seed as u32) ^ (i as u32).wrapping_mul(2654435761)) & 0x3fff_ffff)).collect();
            let v = Volume::new(Shape4::new(c, d, h, w), data, [sz, 1.0, 0.5], vec!["CT".into()]).unwrap();
            let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
            prop_assert_eq!(back.shape, v.shape);
            prop_assert_eq!(back.spacing, v.spacing);
            prop_assert_eq!(back.modality_tags, v.modality_tags);
            prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
