//! The CAPLT binary tensor format.
//!
//! ```text
//! bytes 0..4   magic "CAPL"
//! byte  4      version (1)
//! byte  5      dtype: 0 = f64, 1 = u32
//! byte  6      rank
//! then         rank x u32 little-endian extents
//! then         payload, little-endian, row-major
//! ```
//!
//! Label maps are stored as rank-2 `u32` tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CaplError, Result};
use crate::labels::{ClassLabelMap, InstanceLabelMap};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAPL";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_U32: u8 = 1;

/// A decoded CAPLT payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    Real(Tensor),
    Uint {
        shape: Vec<usize>,
        data: Vec<u32>,
    },
}

fn header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(CaplError::Format(format!("rank {} too large", shape.len())));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, shape.len() as u8]);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| CaplError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 8 * t.len());
    header(&mut out, DTYPE_F64, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u32(shape: &[usize], data: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 4 * data.len());
    header(&mut out, DTYPE_U32, shape)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one blob from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Blob, usize)> {
    let fmt = |m: &str| CaplError::Format(m.to_string());
    if bytes.len() < 7 {
        return Err(fmt("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(CaplError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(fmt("rank must be >= 1"));
    }
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes.get(pos..pos + 4).ok_or_else(|| fmt("truncated extents"))?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fmt("zero extent"));
        }
        shape.push(d);
        pos += 4;
    }
    let n: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt("extent product overflows"))?;
    match dtype {
        DTYPE_F64 => {
            let body = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| fmt("truncated payload"))?;
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((Blob::Real(Tensor::new(shape, data)?), pos + 8 * n))
        }
        DTYPE_U32 => {
            let body = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| fmt("truncated payload"))?;
            let data = body
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((Blob::Uint { shape, data }, pos + 4 * n))
        }
        other => Err(CaplError::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    match decode(bytes)? {
        (Blob::Real(t), n) if n == bytes.len() => Ok(t),
        (Blob::Real(_), _) => Err(CaplError::Format("trailing bytes".into())),
        _ => Err(CaplError::Format("expected a real64 tensor".into())),
    }
}

fn decode_u32_rank2(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    match decode(bytes)? {
        (Blob::Uint { shape, data }, n) if n == bytes.len() && shape.len() == 2 => {
            Ok((shape[0], shape[1], data))
        }
        _ => Err(CaplError::Format("expected a rank-2 uint32 tensor".into())),
    }
}

pub fn encode_instances(m: &InstanceLabelMap) -> Result<Vec<u8>> {
    encode_u32(&[m.height(), m.width()], m.labels())
}

pub fn decode_instances(bytes: &[u8]) -> Result<InstanceLabelMap> {
    let (h, w, data) = decode_u32_rank2(bytes)?;
    InstanceLabelMap::new(h, w, data)
}

pub fn encode_classes(m: &ClassLabelMap) -> Result<Vec<u8>> {
    encode_u32(&[m.height(), m.width()], m.classes())
}

pub fn decode_classes(bytes: &[u8]) -> Result<ClassLabelMap> {
    let (h, w, data) = decode_u32_rank2(bytes)?;
    ClassLabelMap::new(h, w, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CaplError::MissingData(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?)
}

pub fn write_instances(path: &Path, m: &InstanceLabelMap) -> Result<()> {
    write_file(path, &encode_instances(m)?)
}

pub fn read_instances(path: &Path) -> Result<InstanceLabelMap> {
    decode_instances(&read_file(path)?)
}

pub fn write_classes(path: &Path, m: &ClassLabelMap) -> Result<()> {
    write_file(path, &encode_classes(m)?)
}

pub fn read_classes(path: &Path) -> Result<ClassLabelMap> {
    decode_classes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..7], b"CAPL\x01\x00\x02");
        assert_eq!(&b[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[15..23], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 16);

        let m = InstanceLabelMap::new(1, 2, vec![0, 258]).unwrap();
        let b = encode_instances(&m).unwrap();
        assert_eq!(&b[..7], b"CAPL\x01\x01\x02");
        assert_eq!(&b[15..], &[0, 0, 0, 0, 2, 1, 0, 0]);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[2, 2]);
        let mut b = encode_tensor(&t).unwrap();
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_tensor(&b).is_err());
        let mut b = encode_tensor(&t).unwrap();
        b[5] = 9;
        assert!(decode_tensor(&b).is_err());
        let b = encode_instances(&InstanceLabelMap::empty(2, 2)).unwrap();
        assert!(decode_tensor(&b).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let mut rng = crate::rng::SeedStream::new(seed).rng();
            let t = Tensor::random_normal(&shape, 3.0, &mut rng);
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn label_round_trip(labels in prop::collection::vec(any::<u32>(), 12)) {
            let m = InstanceLabelMap::new(3, 4, labels).unwrap();
            prop_assert_eq!(decode_instances(&encode_instances(&m).unwrap()).unwrap(), m);
        }
    }
}
