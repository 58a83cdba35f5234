//! IDX container: `00 00 <dtype> <ndim>`, `ndim` big-endian u32 extents,
//! then the payload in big-endian element order.

use std::io::Read;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_U8: u8 = 0x08;
pub const DTYPE_I32: u8 = 0x0C;
pub const DTYPE_F32: u8 = 0x0D;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

/// Transparently inflate gzip input; other bytes pass through.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse { offset: 0, detail: format!("gzip: {e}") })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn decode_idx(bytes: &[u8]) -> Result<Idx> {
    let parse = |offset, detail: String| Error::Parse { offset, detail };
    if bytes.len() < 4 {
        return Err(parse(bytes.len(), format!("truncated header: {} of 4 bytes", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse(0, format!("bad magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1])));
    }
    let (dtype, ndim) = (bytes[2], bytes[3] as usize);
    let size = match dtype {
        DTYPE_U8 => 1,
        DTYPE_I32 | DTYPE_F32 => 4,
        other => return Err(parse(2, format!("unsupported dtype code 0x{other:02x}"))),
    };
    if ndim == 0 {
        return Err(parse(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse(bytes.len(), format!("truncated header: {} of {header} bytes", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::EmptyDataset(format!("IDX extents {dims:?}")));
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| parse(4, "extent overflow".into()))?;
    let need = count.checked_mul(size).ok_or_else(|| parse(4, "extent overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(parse(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(parse(header + need, format!("{} trailing bytes", payload.len() - need)));
    }
    let word = |c: &[u8]| [c[0], c[1], c[2], c[3]];
    let data = match dtype {
        DTYPE_U8 => IdxData::U8(payload.to_vec()),
        DTYPE_I32 => IdxData::I32(payload.chunks_exact(4).map(|c| i32::from_be_bytes(word(c))).collect()),
        _ => IdxData::F32(payload.chunks_exact(4).map(|c| f32::from_be_bytes(word(c))).collect()),
    };
    Ok(Idx { dims, data })
}

/// Decode to a tensor; u8 payloads are scaled to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let idx = decode_idx(bytes)?;
    let data = match idx.data {
        IdxData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
        IdxData::I32(v) => v.into_iter().map(|b| b as f32).collect(),
        IdxData::F32(v) => v,
    };
    Tensor::new(idx.dims, data)
}

/// Decode a 1-D integer IDX file as class labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let idx = decode_idx(bytes)?;
    if idx.dims.len() != 1 {
        return Err(Error::Parse { offset: 3, detail: format!("label file must be 1-D, got {} dims", idx.dims.len()) });
    }
    match idx.data {
        IdxData::U8(v) => Ok(v.into_iter().map(usize::from).collect()),
        IdxData::I32(v) => v
            .into_iter()
            .map(|l| usize::try_from(l).map_err(|_| Error::input(format!("negative label {l}"))))
            .collect(),
        IdxData::F32(_) => Err(Error::Parse { offset: 2, detail: "label file must hold integers".into() }),
    }
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let dtype = match idx.data {
        IdxData::U8(_) => DTYPE_U8,
        IdxData::I32(_) => DTYPE_I32,
        IdxData::F32(_) => DTYPE_F32,
    };
    let mut out = vec![0, 0, dtype, idx.dims.len() as u8];
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    match &idx.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_cube_scales_to_unit_interval() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(0..8u8);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        for (k, v) in t.data().iter().enumerate() {
            assert_eq!(*v, k as f32 / 255.0);
        }
    }

    #[test]
    fn zero_extent_is_empty_dataset() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2];
        assert!(matches!(parse_idx(&bytes), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn truncation_and_dtype_errors_carry_offsets() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 5];
        bytes.extend([1, 2, 3]);
        assert!(matches!(parse_idx(&bytes), Err(Error::Parse { offset: 11, .. })));
        let bad = [0, 0, 0x0B, 1, 0, 0, 0, 1, 0, 0];
        assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 2, .. })));
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn encode_round_trips_all_dtypes() {
        for data in [IdxData::U8(vec![1, 2, 3, 4, 5, 6]), IdxData::I32(vec![-1, 7, 300, 0, 2, 9]), IdxData::F32(vec![0.25; 6])] {
            let idx = Idx { dims: vec![2, 3], data };
            assert_eq!(decode_idx(&encode_idx(&idx)).unwrap(), idx);
        }
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let raw = encode_idx(&Idx { dims: vec![3], data: IdxData::U8(vec![4, 5, 6]) });
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx_labels(&maybe_gunzip(gz).unwrap()).unwrap(), vec![4, 5, 6]);
        assert_eq!(maybe_gunzip(raw.clone()).unwrap(), raw);
    }
}
