//! Binary PPM (P6, maxval 255) output and montage grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GUTTER: usize = 2;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        ref other => Err(Error::dim("ppm", format!("expected [1|3, H, W], got {other:?}"))),
    }
}

/// Encode `[C, H, W]` with C in {1, 3}; grayscale is replicated to RGB.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = chw(image)?;
    let plane = h * w;
    let x = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(x[(if c == 1 { 0 } else { ch }) * plane + p]));
        }
    }
    Ok(out)
}

/// Decode a P6 file with maxval 255 to `[3, H, W]` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { offset: pos, detail: "truncated PPM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P6" {
        return Err(Error::Parse { offset: 0, detail: format!("expected P6, got {}", fields[0].1) });
    }
    let num = |(at, s): &(usize, String)| s.parse::<usize>().map_err(|_| Error::Parse { offset: *at, detail: format!("bad number {s}") });
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Parse { offset: fields[3].0, detail: format!("unsupported maxval {max}") });
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| Error::Parse {
        offset: bytes.len(),
        detail: format!("truncated PPM body: need {} bytes", 3 * w * h),
    })?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Grid of equally sized `[C, H, W]` images, `cols` per row, separated and
/// framed by black gutters.
pub fn montage(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::input("montage of no images"))?;
    if cols == 0 {
        return Err(Error::input("montage needs at least one column"));
    }
    let (c, h, w) = chw(first)?;
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::dim("montage", format!("image {:?} differs from {:?}", bad.shape(), first.shape())));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + GUTTER) + GUTTER, cols * (w + GUTTER) + GUTTER);
    let mut out = vec![0.0; c * gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = (GUTTER + k / cols * (h + GUTTER), GUTTER + k % cols * (w + GUTTER));
        for ch in 0..c {
            for i in 0..h {
                let d = (ch * gh + r0 + i) * gw + c0;
                out[d..d + w].copy_from_slice(&img.data()[(ch * h + i) * w..(ch * h + i + 1) * w]);
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_clamping() {
        let img = Tensor::new(vec![1, 1, 2], vec![-0.5, 2.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(bytes, b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff".to_vec());
    }

    #[test]
    fn rgb_round_trip_is_byte_exact() {
        let img = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f32 * 20.0 / 255.0).collect()).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
        assert!((back.data()[5] - 100.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn montage_geometry() {
        let imgs: Vec<Tensor> = (0..5).map(|i| Tensor::full(&[1, 3, 4], 0.1 * (i + 1) as f32)).collect();
        let m = montage(&imgs, 3).unwrap();
        assert_eq!(m.shape(), &[1, 2 * 5 + 2, 3 * 6 + 2]);
        let gw = 20;
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[2 * gw + 2], 0.1);
        assert_eq!(m.data()[7 * gw + 2], 0.4);
        assert_eq!(m.data()[7 * gw + 14], 0.0);
        assert!(montage(&[], 2).is_err());
    }
}
