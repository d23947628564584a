//! Single-channel rasters and binary PGM (P5) I/O.
//!
//! [`GrayImage`] holds intensities in `[0, 1]`; [`ScoreMap`] holds arbitrary
//! finite values (network outputs, filter responses) and is normalised into
//! a `GrayImage` before thresholding.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

fn check_extents(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != len {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: format!("raster needs {} samples, got {len}", width * height),
        });
    }
    Ok(())
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        check_extents(width, height, pixels.len())?;
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::OutOfRange(format!(
                "pixel {i} = {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Writes a pixel, clamping into `[0, 1]` to keep the invariant.
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn to_score_map(&self) -> ScoreMap {
        ScoreMap {
            width: self.width,
            height: self.height,
            values: self.pixels.clone(),
        }
    }

    /// `[1, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(vec![1, self.height, self.width], self.pixels.clone())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::File::open(path)?;
        decode_pgm(BufReader::new(f))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>, depth: PgmDepth) -> Result<()> {
        let mut buf = Vec::new();
        encode_pgm(self, depth, &mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        check_extents(width, height, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Min-max normalisation into `[0, 1]`. A flat map becomes all zeros.
    pub fn normalize(&self) -> GrayImage {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi as f64 - lo as f64;
        let pixels = if range > 0.0 {
            self.values
                .iter()
                .map(|&v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.values.len()]
        };
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

pub fn encode_pgm<W: Write>(img: &GrayImage, depth: PgmDepth, mut w: W) -> Result<()> {
    let maxval: u32 = match depth {
        PgmDepth::Eight => 255,
        PgmDepth::Sixteen => 65535,
    };
    write!(w, "P5\n{} {}\n{}\n", img.width, img.height, maxval)?;
    let quant = |p: f32| (p as f64 * maxval as f64).round() as u32;
    match depth {
        PgmDepth::Eight => {
            let bytes: Vec<u8> = img.pixels.iter().map(|&p| quant(p) as u8).collect();
            w.write_all(&bytes)?;
        }
        PgmDepth::Sixteen => {
            let mut bytes = Vec::with_capacity(img.pixels.len() * 2);
            for &p in &img.pixels {
                bytes.extend_from_slice(&(quant(p) as u16).to_be_bytes());
            }
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::format("PGM", "truncated header"));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

pub fn decode_pgm<R: BufRead>(mut r: R) -> Result<GrayImage> {
    let magic = header_token(&mut r)?;
    if magic != "P5" {
        return Err(Error::format(
            "PGM",
            format!("expected P5, found {magic:?}"),
        ));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = header_token(&mut r)?;
        t.parse()
            .map_err(|_| Error::format("PGM", format!("bad {what} {t:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM", "zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            "PGM",
            format!("maxval {maxval} out of range"),
        ));
    }
    let n = width * height;
    let pixels = if maxval < 256 {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("PGM", "truncated raster"))?;
        buf.iter()
            .map(|&b| sample(b as u32, maxval))
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut buf = vec![0u8; 2 * n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("PGM", "truncated raster"))?;
        buf.chunks_exact(2)
            .map(|c| sample(u16::from_be_bytes([c[0], c[1]]) as u32, maxval))
            .collect::<Result<Vec<_>>>()?
    };
    GrayImage::new(width, height, pixels)
}

fn sample(v: u32, maxval: usize) -> Result<f32> {
    if v as usize > maxval {
        return Err(Error::format(
            "PGM",
            format!("sample {v} exceeds maxval {maxval}"),
        ));
    }
    Ok((v as f64 / maxval as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn eight_bit_layout_is_exact() {
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        encode_pgm(&img, PgmDepth::Eight, &mut buf).unwrap();
        assert_eq!(buf, b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let img = GrayImage::new(1, 1, vec![1.0]).unwrap();
        let mut buf = Vec::new();
        encode_pgm(&img, PgmDepth::Sixteen, &mut buf).unwrap();
        assert!(buf.ends_with(&[0xff, 0xff]));
        let img = GrayImage::new(1, 1, vec![256.0 / 65535.0]).unwrap();
        buf.clear();
        encode_pgm(&img, PgmDepth::Sixteen, &mut buf).unwrap();
        assert!(buf.ends_with(&[0x01, 0x00]));
    }

    #[test]
    fn decodes_comments_and_odd_maxval() {
        let data = b"P5 # comment\n2 1\n# another\n100\n\x00\x64";
        let img = decode_pgm(&data[..]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert!(decode_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(decode_pgm(&b"P5\n2 2\n255\n\x00"[..]).is_err());
        assert!(decode_pgm(&b"P5\n1 1\n100\n\xff"[..]).is_err());
    }

    #[test]
    fn normalisation_handles_flat_maps() {
        let m = ScoreMap::new(2, 2, vec![3.0; 4]).unwrap();
        assert_eq!(m.normalize().pixels(), &[0.0; 4]);
        let m = ScoreMap::new(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.normalize().pixels(), &[0.0, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn sixteen_bit_round_trip_within_half_step(v in proptest::collection::vec(0f32..=1.0, 1..64)) {
            let img = GrayImage::new(v.len(), 1, v).unwrap();
            let mut buf = Vec::new();
            encode_pgm(&img, PgmDepth::Sixteen, &mut buf).unwrap();
            let back = decode_pgm(&buf[..]).unwrap();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
            }
            // quantised data re-encodes to the same bytes
            let mut again = Vec::new();
            encode_pgm(&back, PgmDepth::Sixteen, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn normalisation_is_idempotent(v in proptest::collection::vec(-5f32..5.0, 1..64)) {
            let once = ScoreMap::new(v.len(), 1, v).unwrap().normalize();
            let twice = once.to_score_map().normalize();
            prop_assert_eq!(once, twice);
        }
    }
}
