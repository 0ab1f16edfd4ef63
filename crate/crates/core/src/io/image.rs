//! Binary PPM decoding and the evaluation-time resize, crop and normalisation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Fraction of the resized shorter side kept by the centre crop.
pub const CROP_RATIO: f64 = 0.9;

/// Reads a binary (`P6`, maxval 255) PPM as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Image(format!(
            "expected a binary PPM (P6), found `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval must be 255, found {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("image has zero extent {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let plane = w * h;
    let raster = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::Image(format!("raster holds {} bytes, expected {}", bytes.len().saturating_sub(pos), 3 * plane)))?;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor4::from_vec(1, 3, h, w, data)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Image("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("PPM {what} `{}` is not a number", String::from_utf8_lossy(tok))))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor4, oh: usize, ow: usize) -> Result<Tensor4> {
    if oh == 0 || ow == 0 || img.is_empty() {
        return Err(Error::Image(format!("cannot resize {:?} to {oh}x{ow}", img.shape())));
    }
    let (ih, iw) = (img.h(), img.w());
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64).min(1.0) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(ih, oh), taps(iw, ow));
    let mut out = Tensor4::zeros(img.n(), img.c(), oh, ow);
    for n in 0..img.n() {
        for c in 0..img.c() {
            let base = img.index(n, c, 0, 0);
            let src = &img.data()[base..base + ih * iw];
            let obase = out.index(n, c, 0, 0);
            let dst = &mut out.data_mut()[obase..obase + oh * ow];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
                    let bot = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
                    dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn center_crop(img: &Tensor4, size: usize) -> Result<Tensor4> {
    if img.h() < size || img.w() < size {
        return Err(Error::Image(format!("{}x{} image is smaller than the {size} crop", img.h(), img.w())));
    }
    let (top, left) = ((img.h() - size) / 2, (img.w() - size) / 2);
    Ok(Tensor4::from_fn(img.n(), img.c(), size, size, |n, c, y, x| img.at(n, c, top + y, left + x)))
}

/// Output extent of the shorter-side resize that precedes a `crop` centre crop.
pub fn resize_extent(h: usize, w: usize, crop: usize) -> (usize, usize) {
    let short = (crop as f64 / CROP_RATIO).round();
    if h <= w {
        (short as usize, (w as f64 * short / h as f64).round() as usize)
    } else {
        ((h as f64 * short / w as f64).round() as usize, short as usize)
    }
}

/// Resize and centre crop without normalisation.
pub fn resize_and_crop(img: &Tensor4, crop: usize) -> Result<Tensor4> {
    let (oh, ow) = resize_extent(img.h(), img.w(), crop);
    center_crop(&resize_bilinear(img, oh, ow)?, crop)
}

/// Full evaluation transform: shorter side to `round(crop / 0.9)`, centre
/// crop, per-channel ImageNet normalisation.
pub fn preprocess(img: &Tensor4, crop: usize) -> Result<Tensor4> {
    if img.c() != 3 {
        return Err(Error::Image(format!("expected 3 colour channels, found {}", img.c())));
    }
    let mut out = resize_and_crop(img, crop)?;
    let plane = out.spatial();
    for n in 0..out.n() {
        for (c, chunk) in out.sample_mut(n).chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    Ok(out)
}

/// Encodes an RGB tensor in `[0, 1]` as a binary PPM.
pub fn encode_ppm(img: &Tensor4) -> Vec<u8> {
    let (h, w) = (img.h(), img.w());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_scaling() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), [1, 3, 2, 2]);
        assert_eq!(img.at(0, 0, 0, 0), 1.0);
        assert_eq!(img.at(0, 1, 0, 0), 0.0);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # comment\n1 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[128, 128, 128]);
        assert_eq!(decode_ppm(&bytes).unwrap().data(), &[128.0 / 255.0; 3]);
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn uniform_image_stays_uniform() {
        let img = Tensor4::full(1, 3, 300, 500, 128.0 / 255.0);
        let out = resize_and_crop(&img, 224).unwrap();
        assert_eq!(out.shape(), [1, 3, 224, 224]);
        assert!(out.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn resize_geometry() {
        assert_eq!(resize_extent(300, 500, 224), (249, 415));
        assert_eq!(resize_extent(500, 300, 224), (415, 249));
        assert_eq!(resize_extent(224, 224, 224), (249, 249));
    }
}
