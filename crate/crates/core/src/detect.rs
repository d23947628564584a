//! Frame-level detection: normalise the TEM output, threshold at
//! `T = μ + k·σ`, then split the mask into 8-connected components.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, ScoreMap};
use crate::synth::FusionLocation;
use crate::tem::{extract, TemNet};
use crate::tensor::stats_of;

pub const DEFAULT_K: f64 = 25.0;

/// Binary mask plus the intensities it was cut from (used for peaks).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    values: Vec<f32>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask needs {} cells, got {}", width * height, bits.len()),
            });
        }
        let values = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            width,
            height,
            bits,
            values,
        })
    }

    /// Pixels strictly above `threshold`.
    pub fn above(img: &GrayImage, threshold: f64) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().iter().map(|&v| v as f64 > threshold).collect(),
            values: img.pixels().to_vec(),
        }
    }

    pub fn above_scores(scores: &ScoreMap, threshold: f64) -> Self {
        Self {
            width: scores.width(),
            height: scores.height(),
            bits: scores.values().iter().map(|&v| v as f64 > threshold).collect(),
            values: scores.values().to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask extents already validated")
    }
}

/// Binarises a normalised image at `μ + k·σ` (population statistics).
/// A flat image yields an empty mask since no pixel exceeds its mean.
pub fn adaptive_threshold(img: &GrayImage, k: f64) -> Result<Mask> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Config(format!("threshold factor k must be positive, got {k}")));
    }
    Ok(Mask::above(img, threshold_value(img, k)?))
}

pub fn threshold_value(img: &GrayImage, k: f64) -> Result<f64> {
    let s = stats_of(img.pixels())?;
    Ok(s.mean + k * s.std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `(x, y)` mean of the member pixel coordinates.
    pub centroid: (f64, f64),
    pub pixel_count: usize,
    pub peak_value: f32,
    pub bbox: FusionLocation,
    /// Flat indices of the member pixels, ascending.
    #[serde(skip)]
    pub pixels: Vec<usize>,
}

/// 8-connected components of the mask, ordered by bounding-box top, then
/// left, then first pixel in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Detection> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (px, py) = (p % w, p / w);
            for ny in py.saturating_sub(1)..=(py + 1).min(h - 1) {
                for nx in px.saturating_sub(1)..=(px + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(describe(pixels, w, &mask.values));
    }
    out.sort_by_key(|d| (d.bbox.y0, d.bbox.x0, d.pixels[0]));
    out
}

fn describe(pixels: Vec<usize>, w: usize, values: &[f32]) -> Detection {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sx, mut sy) = (0f64, 0f64);
    let mut peak = f32::NEG_INFINITY;
    for &p in &pixels {
        let (x, y) = (p % w, p / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        sx += x as f64;
        sy += y as f64;
        peak = peak.max(values[p]);
    }
    let n = pixels.len() as f64;
    Detection {
        centroid: (sx / n, sy / n),
        pixel_count: pixels.len(),
        peak_value: peak,
        bbox: FusionLocation {
            x0,
            y0,
            h0: y1 - y0 + 1,
            w0: x1 - x0 + 1,
        },
        pixels,
    }
}

/// Everything the pipeline produced for one frame.
#[derive(Debug, Clone)]
pub struct FrameDetection {
    pub target: ScoreMap,
    pub normalized: GrayImage,
    pub mask: Mask,
    pub detections: Vec<Detection>,
}

/// Thresholds an arbitrary score map (TEM output or baseline filter).
pub fn detect_scores(target: ScoreMap, k: f64) -> Result<FrameDetection> {
    let normalized = target.normalize();
    let mask = adaptive_threshold(&normalized, k)?;
    let detections = connected_components(&mask);
    Ok(FrameDetection {
        target,
        normalized,
        mask,
        detections,
    })
}

pub fn detect(net: &TemNet, f_d: &GrayImage, k: f64) -> Result<FrameDetection> {
    detect_scores(extract(net, f_d)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: String,
    pub centroid: [f64; 2],
    pub pixel_count: usize,
    pub peak: f32,
    pub bbox: [usize; 4],
}

impl DetectionRecord {
    pub fn new(frame: &str, d: &Detection) -> Self {
        Self {
            frame: frame.to_string(),
            centroid: [d.centroid.0, d.centroid.1],
            pixel_count: d.pixel_count,
            peak: d.peak_value,
            bbox: [d.bbox.x0, d.bbox.y0, d.bbox.h0, d.bbox.w0],
        }
    }
}

/// One JSON object per detection, one per line.
pub fn write_jsonl<W: Write>(mut w: W, frame: &str, detections: &[Detection]) -> Result<()> {
    for d in detections {
        serde_json::to_writer(&mut w, &DetectionRecord::new(frame, d))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mask_from(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut bits = vec![false; w * h];
        for &(x, y) in on {
            bits[y * w + x] = true;
        }
        Mask::new(w, h, bits).unwrap()
    }

    /// Recursive labelling, independent of the iterative scan above.
    fn flood_count(mask: &Mask) -> usize {
        fn fill(m: &Mask, seen: &mut [bool], x: isize, y: isize) {
            if x < 0 || y < 0 || x >= m.width() as isize || y >= m.height() as isize {
                return;
            }
            let i = y as usize * m.width() + x as usize;
            if !m.bits()[i] || seen[i] {
                return;
            }
            seen[i] = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    fill(m, seen, x + dx, y + dy);
                }
            }
        }
        let mut seen = vec![false; mask.bits().len()];
        let mut n = 0;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) && !seen[y * mask.width() + x] {
                    n += 1;
                    fill(mask, &mut seen, x as isize, y as isize);
                }
            }
        }
        n
    }

    #[test]
    fn flat_images_give_empty_masks() {
        for v in [0.0, 0.3, 1.0] {
            let img = GrayImage::filled(16, 16, v).unwrap();
            assert_eq!(adaptive_threshold(&img, 25.0).unwrap().count(), 0);
            assert_eq!(adaptive_threshold(&img, 0.5).unwrap().count(), 0);
        }
        assert!(adaptive_threshold(&GrayImage::zeros(4, 4), 0.0).is_err());
    }

    #[test]
    fn single_bright_pixel_threshold() {
        let mut img = GrayImage::zeros(256, 256);
        img.set(100, 50, 1.0);
        let mu = 1.0 / 65536.0;
        let sigma = (mu - mu * mu as f64).sqrt();
        let t = threshold_value(&img, 25.0).unwrap();
        assert!((t - (mu + 25.0 * sigma)).abs() < 1e-12);
        assert!((t - 0.0977).abs() < 1e-3);
        let m = adaptive_threshold(&img, 25.0).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(100, 50));
    }

    #[test]
    fn threshold_is_affine_invariant() {
        let mut rng = Rng::new(1);
        let px: Vec<f32> = (0..400).map(|_| rng.uniform(0.0, 0.5)).collect();
        let a = GrayImage::new(20, 20, px.clone()).unwrap();
        let b = GrayImage::new(20, 20, px.iter().map(|v| 2.0 * v).collect()).unwrap();
        for k in [0.5, 1.0, 2.0] {
            let ma = adaptive_threshold(&a, k).unwrap();
            let mb = adaptive_threshold(&b, k).unwrap();
            assert_eq!(ma.bits(), mb.bits());
        }
    }

    #[test]
    fn component_examples() {
        let m = mask_from(6, 6, &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        let c = connected_components(&m);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].pixel_count, 4);
        assert_eq!(c[0].centroid, (1.5, 1.5));
        assert_eq!(c[0].bbox, FusionLocation { x0: 1, y0: 1, h0: 2, w0: 2 });
        let m = mask_from(6, 6, &[(0, 0), (2, 2), (4, 0)]);
        assert_eq!(connected_components(&m).len(), 3);
        // diagonal neighbours join under 8-connectivity
        let m = mask_from(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn components_are_ordered_top_then_left() {
        let m = mask_from(8, 8, &[(6, 0), (1, 3), (4, 3), (0, 6)]);
        let c = connected_components(&m);
        let tops: Vec<(usize, usize)> = c.iter().map(|d| (d.bbox.y0, d.bbox.x0)).collect();
        assert_eq!(tops, vec![(0, 6), (3, 1), (3, 4), (6, 0)]);
    }

    #[test]
    fn jsonl_record_layout() {
        let m = mask_from(4, 4, &[(1, 2)]);
        let c = connected_components(&m);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, "f0", &c).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"frame\":\"f0\",\"centroid\":[1.0,2.0],\"pixel_count\":1,\"peak\":1.0,\"bbox\":[1,2,1,1]}\n"
        );
    }

    proptest! {
        #[test]
        fn components_partition_the_mask(seed in 0u64..5000, density in 0.05f32..0.7) {
            let mut rng = Rng::new(seed);
            let (w, h) = (1 + rng.index(24), 1 + rng.index(24));
            let bits: Vec<bool> = (0..w * h).map(|_| rng.uniform(0.0, 1.0) < density).collect();
            let m = Mask::new(w, h, bits).unwrap();
            let c = connected_components(&m);
            prop_assert_eq!(c.len(), flood_count(&m));
            prop_assert_eq!(c.iter().map(|d| d.pixel_count).sum::<usize>(), m.count());
            for d in &c {
                let b = d.bbox;
                prop_assert!(d.centroid.0 >= b.x0 as f64 && d.centroid.0 <= (b.x0 + b.w0 - 1) as f64);
                prop_assert!(d.centroid.1 >= b.y0 as f64 && d.centroid.1 <= (b.y0 + b.h0 - 1) as f64);
            }
        }

        #[test]
        fn lower_k_gives_superset_masks(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let img = GrayImage::new(16, 16, (0..256).map(|_| rng.uniform(0.0, 1.0).powi(6)).collect()).unwrap();
            let hi = adaptive_threshold(&img, 3.0).unwrap();
            let lo = adaptive_threshold(&img, 2.0).unwrap();
            for (a, b) in hi.bits().iter().zip(lo.bits()) {
                prop_assert!(!a || *b);
            }
        }
    }
}
