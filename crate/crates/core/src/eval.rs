//! Detection scoring (Pd, Fa, ROC), contrast metrics (SCR, SCRG, BSF) and
//! the classical single-frame baselines.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{adaptive_threshold, connected_components, Detection, Mask};
use crate::error::{Error, Result};
use crate::image::{GrayImage, ScoreMap};
use crate::synth::{DatasetEntry, FusionLocation};

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const RING: usize = 5;

/// Target boxes of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<FusionLocation>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<FusionLocation>, width: usize, height: usize) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| !b.fits(width, height)) {
            return Err(Error::OutOfRange(format!("ground-truth box {b:?} outside {width}x{height} frame")));
        }
        Ok(Self { boxes })
    }

    pub fn from_entry(e: &DatasetEntry) -> Self {
        Self {
            boxes: e.tuple.boxes.clone(),
        }
    }

    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.boxes
            .iter()
            .map(|b| (b.x0 as f64 + (b.w0 as f64 - 1.0) / 2.0, b.y0 as f64 + (b.h0 as f64 - 1.0) / 2.0))
            .collect()
    }
}

fn in_dilated(b: &FusionLocation, r: usize, x: f64, y: f64) -> bool {
    let r = r as f64;
    x >= b.x0 as f64 - r
        && x <= (b.x0 + b.w0 - 1) as f64 + r
        && y >= b.y0 as f64 - r
        && y <= (b.y0 + b.h0 - 1) as f64 + r
}

/// Whether detection `d` finds target `g`: its centroid lies in the box
/// dilated by `radius`, or it covers the box centre pixel.
pub fn hits(d: &Detection, g: &FusionLocation, radius: usize, width: usize) -> bool {
    let (cx, cy) = g.center();
    in_dilated(g, radius, d.centroid.0, d.centroid.1) || d.pixels.binary_search(&(cy * width + cx)).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub true_detections: usize,
    pub false_pixels: usize,
    /// For each GT box, the index of the detection credited with it.
    pub credited: Vec<Option<usize>>,
}

/// Credits each GT box to the first detection (in list order) that hits
/// it. A detected pixel is a false alarm when it lies outside every GT box
/// dilated by `radius`, so raising the threshold can never add false pixels.
pub fn match_and_score(detections: &[Detection], gt: &GroundTruth, radius: usize, width: usize) -> MatchResult {
    let credited: Vec<Option<usize>> = gt
        .boxes
        .iter()
        .map(|g| detections.iter().position(|d| hits(d, g, radius, width)))
        .collect();
    let false_pixels = detections
        .iter()
        .flat_map(|d| d.pixels.iter())
        .filter(|&&p| {
            let (x, y) = ((p % width) as f64, (p / width) as f64);
            !gt.boxes.iter().any(|g| in_dilated(g, radius, x, y))
        })
        .count();
    MatchResult {
        true_detections: credited.iter().filter(|c| c.is_some()).count(),
        false_pixels,
        credited,
    }
}

/// Aggregate counts over a set of frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub true_detections: usize,
    pub targets: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

impl Score {
    pub fn add(&mut self, other: &Score) {
        self.true_detections += other.true_detections;
        self.targets += other.targets;
        self.false_pixels += other.false_pixels;
        self.pixels += other.pixels;
    }

    /// Detected fraction of targets; 1 when there are none to find.
    pub fn pd(&self) -> f64 {
        if self.targets == 0 {
            1.0
        } else {
            self.true_detections as f64 / self.targets as f64
        }
    }

    pub fn fa(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.false_pixels as f64 / self.pixels as f64
        }
    }
}

pub fn score_frame(detections: &[Detection], gt: &GroundTruth, radius: usize, width: usize, height: usize) -> Score {
    let m = match_and_score(detections, gt, radius, width);
    Score {
        true_detections: m.true_detections,
        targets: gt.boxes.len(),
        false_pixels: m.false_pixels,
        pixels: width * height,
    }
}

/// Scores several frames' detections, in parallel per frame.
pub fn score_frames(frames: &[(Vec<Detection>, usize, usize)], gts: &[GroundTruth], radius: usize) -> Result<Score> {
    if frames.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gts.len()],
            actual: vec![frames.len()],
        });
    }
    let per: Vec<Score> = frames
        .par_iter()
        .zip(gts)
        .map(|((d, w, h), g)| score_frame(d, g, radius, *w, *h))
        .collect();
    let mut total = Score::default();
    per.iter().for_each(|s| total.add(s));
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa: f64,
    pub pd: f64,
}

/// Points in ascending threshold order (threshold is `k` for adaptive sweeps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Highest-Pd point with `fa <= max_fa` (ties: lowest Fa).
    pub fn best_at(&self, max_fa: f64) -> Option<RocPoint> {
        self.points
            .iter()
            .filter(|p| p.fa <= max_fa)
            .copied()
            .max_by(|a, b| a.pd.total_cmp(&b.pd).then(b.fa.total_cmp(&a.fa)))
    }
}

/// Sweeps raw score thresholds (`score > t` is a detection) over all frames.
pub fn roc(scores: &[ScoreMap], gts: &[GroundTruth], thresholds: &[f64], radius: usize) -> Result<RocCurve> {
    if thresholds.len() < 2 {
        return Err(Error::Config("an ROC sweep needs at least two thresholds".into()));
    }
    if scores.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gts.len()],
            actual: vec![scores.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("score image set"));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    let per_frame: Vec<Vec<Score>> = scores
        .par_iter()
        .zip(gts)
        .map(|(s, g)| {
            ts.iter()
                .map(|&t| {
                    let d = connected_components(&Mask::above_scores(s, t));
                    score_frame(&d, g, radius, s.width(), s.height())
                })
                .collect()
        })
        .collect();
    let points = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut total = Score::default();
            per_frame.iter().for_each(|f| total.add(&f[i]));
            RocPoint {
                threshold: t,
                fa: total.fa(),
                pd: total.pd(),
            }
        })
        .collect();
    Ok(RocCurve { points })
}

/// Sweeps the detector's own per-frame threshold `μ + k·σ` over `ks`
/// (ascending `k` gives descending thresholds), on normalised frames.
pub fn roc_adaptive(frames: &[GrayImage], gts: &[GroundTruth], ks: &[f64], radius: usize) -> Result<RocCurve> {
    if ks.len() < 2 {
        return Err(Error::Config("an ROC sweep needs at least two values of k".into()));
    }
    if frames.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gts.len()],
            actual: vec![frames.len()],
        });
    }
    if frames.is_empty() {
        return Err(Error::Empty("frame set"));
    }
    let mut ks = ks.to_vec();
    ks.sort_by(f64::total_cmp);
    let per_frame: Vec<Vec<Score>> = frames
        .par_iter()
        .zip(gts)
        .map(|(f, g)| {
            ks.iter()
                .map(|&k| {
                    let d = connected_components(&adaptive_threshold(f, k)?);
                    Ok(score_frame(&d, g, radius, f.width(), f.height()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let points = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut total = Score::default();
            per_frame.iter().for_each(|f| total.add(&f[i]));
            RocPoint {
                threshold: k,
                fa: total.fa(),
                pd: total.pd(),
            }
        })
        .collect();
    Ok(RocCurve { points })
}

/// Thresholds that admit roughly a fraction `q` of all pixels, for `n`
/// log-spaced `q` in `[1e-6, 1]`, plus one value above the global maximum.
pub fn quantile_thresholds(scores: &[ScoreMap], n: usize) -> Vec<f64> {
    let mut all: Vec<f32> = scores.iter().flat_map(|s| s.values().iter().copied()).collect();
    if all.is_empty() || n < 2 {
        return vec![0.0, 1.0];
    }
    all.sort_by(|a, b| b.total_cmp(a));
    let mut ts: Vec<f64> = (0..n)
        .map(|i| {
            let q = 10f64.powf(-6.0 + 6.0 * i as f64 / (n - 1) as f64);
            let rank = ((q * all.len() as f64).ceil() as usize).clamp(1, all.len());
            // just below the rank-th largest value so it is admitted
            let v = all[rank - 1] as f64;
            v - 1e-9 * v.abs().max(1.0)
        })
        .collect();
    ts.push(all[0] as f64 + 1e-6);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

fn ring_stats(img: &ScoreMap, b: &FusionLocation) -> Result<(f64, f64)> {
    if b.x0 < RING || b.y0 < RING || b.x0 + b.w0 + RING > img.width() || b.y0 + b.h0 + RING > img.height() {
        return Err(Error::OutOfRange(format!(
            "{RING}-pixel background ring around {b:?} leaves the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut v = Vec::new();
    for y in b.y0 - RING..b.y0 + b.h0 + RING {
        for x in b.x0 - RING..b.x0 + b.w0 + RING {
            if !b.contains(x, y) {
                v.push(img.get(x, y) as f64);
            }
        }
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `|M_t − m_b| / (σ_b + λ)` with `M_t` the box maximum and `m_b`, `σ_b`
/// taken over the 5-pixel ring around the box.
pub fn scr(img: &ScoreMap, b: &FusionLocation, lambda: f64) -> Result<f64> {
    let (m_b, s_b) = ring_stats(img, b)?;
    let mut m_t = f64::NEG_INFINITY;
    for y in b.y0..b.y0 + b.h0 {
        for x in b.x0..b.x0 + b.w0 {
            m_t = m_t.max(img.get(x, y) as f64);
        }
    }
    Ok((m_t - m_b).abs() / (s_b + lambda))
}

pub fn scrg(input: &ScoreMap, output: &ScoreMap, b: &FusionLocation, lambda: f64) -> Result<f64> {
    Ok(scr(output, b, lambda)? / (scr(input, b, lambda)? + lambda))
}

/// Ratio of background-ring standard deviations before and after.
pub fn bsf(input: &ScoreMap, output: &ScoreMap, b: &FusionLocation, lambda: f64) -> Result<f64> {
    Ok(ring_stats(input, b)?.1 / (ring_stats(output, b)?.1 + lambda))
}

fn check_window(img: &ScoreMap, size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 || size > img.width() || size > img.height() {
        return Err(Error::Config(format!(
            "window {size} must be odd and fit the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn clamped(img: &ScoreMap, x: isize, y: isize) -> f32 {
    let cx = x.clamp(0, img.width() as isize - 1) as usize;
    let cy = y.clamp(0, img.height() as isize - 1) as usize;
    img.get(cx, cy)
}

/// Separable square min/max filter with replicated borders.
fn square_filter(img: &ScoreMap, size: usize, pick: fn(f32, f32) -> f32) -> ScoreMap {
    let (w, h) = (img.width(), img.height());
    let r = (size / 2) as isize;
    let mut rows = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| clamped(img, x as isize + d, y as isize))
                .reduce(pick)
                .unwrap();
        }
    }
    let rows = ScoreMap::new(w, h, rows).expect("same extents");
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| clamped(&rows, x as isize, y as isize + d))
                .reduce(pick)
                .unwrap();
        }
    }
    ScoreMap::new(w, h, out).expect("same extents")
}

/// White top-hat: image minus its opening by a flat `se`×`se` square.
pub fn tophat(img: &ScoreMap, se: usize) -> Result<ScoreMap> {
    check_window(img, se)?;
    let opened = square_filter(&square_filter(img, se, f32::min), se, f32::max);
    ScoreMap::new(
        img.width(),
        img.height(),
        img.values().iter().zip(opened.values()).map(|(a, b)| a - b).collect(),
    )
}

const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

fn directional(img: &ScoreMap, size: usize, reduce: fn(&mut [f32]) -> f32) -> Result<ScoreMap> {
    check_window(img, size)?;
    let r = (size / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut line = vec![0f32; size];
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = f32::NEG_INFINITY;
            for (dx, dy) in DIRECTIONS {
                for (k, t) in (-r..=r).enumerate() {
                    line[k] = clamped(img, x + t * dx, y + t * dy);
                }
                m = m.max(reduce(&mut line));
            }
            out.push(clamped(img, x, y) - m);
        }
    }
    ScoreMap::new(w, h, out)
}

fn line_mean(v: &mut [f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

fn line_median(v: &mut [f32]) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

/// Image minus the largest of the four directional means through each pixel.
pub fn max_mean(img: &ScoreMap, window: usize) -> Result<ScoreMap> {
    directional(img, window, line_mean)
}

/// Image minus the largest of the four directional medians through each pixel.
pub fn max_median(img: &ScoreMap, window: usize) -> Result<ScoreMap> {
    directional(img, window, line_median)
}

/// `%g`-style formatting with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= p as i32 {
        format!("{}e{exp}", trim(mant))
    } else {
        trim(&format!("{:.*}", (p as i32 - 1 - exp) as usize, x))
    }
}

pub fn write_roc_csv<W: Write>(mut w: W, curve: &RocCurve) -> Result<()> {
    writeln!(w, "threshold,fa,pd")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", fmt_sig(p.threshold, 6), fmt_sig(p.fa, 6), fmt_sig(p.pd, 6))?;
    }
    Ok(())
}

/// One row of the per-target contrast table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame: String,
    pub target: usize,
    pub scr_in: f64,
    pub scr_out: f64,
    pub scrg: f64,
    pub bsf: f64,
}

pub fn metric_row(frame: &str, target: usize, input: &ScoreMap, output: &ScoreMap, b: &FusionLocation, lambda: f64) -> Result<MetricRow> {
    Ok(MetricRow {
        frame: frame.to_string(),
        target,
        scr_in: scr(input, b, lambda)?,
        scr_out: scr(output, b, lambda)?,
        scrg: scrg(input, output, b, lambda)?,
        bsf: bsf(input, output, b, lambda)?,
    })
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "frame,target,scr_in,scr_out,scrg,bsf")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.frame,
            r.target,
            fmt_sig(r.scr_in, 6),
            fmt_sig(r.scr_out, 6),
            fmt_sig(r.scrg, 6),
            fmt_sig(r.bsf, 6)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn det(w: usize, pixels: &[(usize, usize)]) -> Detection {
        let h = pixels.iter().map(|p| p.1).max().unwrap() + 1;
        let mut bits = vec![false; w * h.max(1)];
        for &(x, y) in pixels {
            bits[y * w + x] = true;
        }
        let mut c = connected_components(&Mask::new(w, h, bits).unwrap());
        assert_eq!(c.len(), 1);
        c.pop().unwrap()
    }

    fn bx(x0: usize, y0: usize, h0: usize, w0: usize) -> FusionLocation {
        FusionLocation { x0, y0, h0, w0 }
    }

    fn random_map(w: usize, h: usize, rng: &mut Rng) -> ScoreMap {
        ScoreMap::new(w, h, (0..w * h).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn matching_examples() {
        let gt = GroundTruth { boxes: vec![bx(10, 10, 3, 3)] };
        let on = det(32, &[(10, 10), (11, 11), (12, 12)]);
        let m = match_and_score(&[on.clone()], &gt, 2, 32);
        assert_eq!((m.true_detections, m.false_pixels), (1, 0));
        let far = det(32, &[(25, 11), (26, 11)]);
        let m = match_and_score(&[far.clone()], &gt, 2, 32);
        assert_eq!((m.true_detections, m.false_pixels), (0, 2));
        // second hit on the same target: centroid (14, 14) is inside the
        // dilated box, pixel (15, 14) is outside it
        let near = det(32, &[(13, 14), (14, 14), (15, 14)]);
        let m = match_and_score(&[on, near], &gt, 2, 32);
        assert_eq!((m.true_detections, m.false_pixels, m.credited.clone()), (1, 1, vec![Some(0)]));
    }

    // brute force: scan detections per target, then every pixel of the frame
    fn oracle(dets: &[Detection], gt: &GroundTruth, r: usize, w: usize) -> (usize, usize) {
        let mut found = 0;
        for g in &gt.boxes {
            for d in dets {
                let (cx, cy) = d.centroid;
                let lo_x = g.x0 as f64 - r as f64;
                let hi_x = (g.x0 + g.w0) as f64 - 1.0 + r as f64;
                let lo_y = g.y0 as f64 - r as f64;
                let hi_y = (g.y0 + g.h0) as f64 - 1.0 + r as f64;
                let centre = g.y0 * w + g.x0 + (g.w0 - 1) / 2 + (g.h0 - 1) / 2 * w;
                let hit = (lo_x..=hi_x).contains(&cx) && (lo_y..=hi_y).contains(&cy) || d.pixels.contains(&centre);
                if hit {
                    found += 1;
                    break;
                }
            }
        }
        let mut fp = 0;
        for y in 0..w {
            for x in 0..w {
                let on = dets.iter().any(|d| d.pixels.contains(&(y * w + x)));
                let inside = gt.boxes.iter().any(|g| {
                    x + r >= g.x0 && x <= g.x0 + g.w0 - 1 + r && y + r >= g.y0 && y <= g.y0 + g.h0 - 1 + r
                });
                if on && !inside {
                    fp += 1;
                }
            }
        }
        (found, fp)
    }

    #[test]
    fn matching_agrees_with_oracle_on_small_scenes() {
        let mut rng = Rng::new(11);
        for _ in 0..500 {
            let w = 16;
            let bits: Vec<bool> = (0..w * w).map(|_| rng.uniform(0.0, 1.0) < 0.15).collect();
            let dets = connected_components(&Mask::new(w, w, bits).unwrap());
            let n = rng.int_inclusive(0, 3);
            let boxes = (0..n)
                .map(|_| bx(rng.int_inclusive(0, 12), rng.int_inclusive(0, 12), rng.int_inclusive(1, 4), rng.int_inclusive(1, 4)))
                .collect();
            let gt = GroundTruth { boxes };
            for r in 0..3 {
                let m = match_and_score(&dets, &gt, r, w);
                assert_eq!((m.true_detections, m.false_pixels), oracle(&dets, &gt, r, w));
            }
        }
    }

    #[test]
    fn roc_limits_and_monotonicity() {
        let mut rng = Rng::new(12);
        let maps: Vec<ScoreMap> = (0..3).map(|_| random_map(32, 32, &mut rng)).collect();
        let gts: Vec<GroundTruth> = (0..3).map(|i| GroundTruth { boxes: vec![bx(4 + i, 5, 3, 3), bx(20, 20 + i, 2, 4)] }).collect();
        let ts: Vec<f64> = (0..=20).map(|i| -0.1 + i as f64 * 0.06).collect();
        let c = roc(&maps, &gts, &ts, 2).unwrap();
        let first = c.points.first().unwrap();
        assert_eq!(first.pd, 1.0);
        // everything detected: only the dilated boxes (7x7 and 6x8) are exempt
        assert_eq!(first.fa, 1.0 - (49.0 + 48.0) / 1024.0);
        let last = c.points.last().unwrap();
        assert_eq!((last.fa, last.pd), (0.0, 0.0));
        for p in c.points.windows(2) {
            assert!(p[0].threshold <= p[1].threshold);
            assert!(p[1].fa <= p[0].fa);
        }
        assert!(roc(&maps, &gts, &[0.5], 2).is_err());
    }

    #[test]
    fn scr_examples() {
        let mut v = vec![0f32; 20 * 20];
        v[10 * 20 + 10] = 1.0;
        let img = ScoreMap::new(20, 20, v).unwrap();
        let b = bx(9, 9, 3, 3);
        assert!((scr(&img, &b, DEFAULT_LAMBDA).unwrap() - 100.0).abs() < 1e-9);
        assert!(scr(&img, &bx(2, 2, 3, 3), DEFAULT_LAMBDA).is_err());

        let mut rng = Rng::new(13);
        let n = random_map(24, 24, &mut rng);
        let b = bx(9, 9, 4, 4);
        let s = scr(&n, &b, DEFAULT_LAMBDA).unwrap();
        assert!((scrg(&n, &n, &b, DEFAULT_LAMBDA).unwrap() - s / (s + DEFAULT_LAMBDA)).abs() < 1e-12);
        let (_, sigma) = ring_stats(&n, &b).unwrap();
        assert!((bsf(&n, &n, &b, DEFAULT_LAMBDA).unwrap() - sigma / (sigma + DEFAULT_LAMBDA)).abs() < 1e-12);
        let flat = ScoreMap::new(24, 24, vec![0.3; 576]).unwrap();
        let f = bsf(&n, &flat, &b, DEFAULT_LAMBDA).unwrap();
        assert!(f.is_finite() && (f - sigma / DEFAULT_LAMBDA).abs() < 1e-9);
    }

    #[test]
    fn bsf_scale_invariant_in_strict_mode() {
        let mut rng = Rng::new(14);
        let a = random_map(24, 24, &mut rng);
        let b = random_map(24, 24, &mut rng);
        let scale = |m: &ScoreMap, s: f32| ScoreMap::new(24, 24, m.values().iter().map(|v| v * s).collect()).unwrap();
        let bb = bx(9, 9, 4, 4);
        let base = bsf(&a, &b, &bb, 0.0).unwrap();
        let scaled = bsf(&scale(&a, 4.0), &scale(&b, 4.0), &bb, 0.0).unwrap();
        assert!((base - scaled).abs() < 1e-6 * base);
        let s1 = scrg(&a, &b, &bb, 0.0).unwrap();
        let s2 = scrg(&scale(&a, 4.0), &scale(&b, 4.0), &bb, 0.0).unwrap();
        assert!((s1 - s2).abs() < 1e-6 * s1);
    }

    #[test]
    fn baselines_vanish_on_constant_images() {
        let c = ScoreMap::new(32, 32, vec![0.37; 1024]).unwrap();
        for out in [tophat(&c, 5).unwrap(), max_mean(&c, 15).unwrap(), max_median(&c, 15).unwrap()] {
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
        assert!(tophat(&c, 4).is_err());
        assert!(max_mean(&c, 33).is_err());
    }

    #[test]
    fn tophat_keeps_a_point_target() {
        let mut v = vec![0.2f32; 32 * 32];
        v[16 * 32 + 16] = 0.9;
        let out = tophat(&ScoreMap::new(32, 32, v).unwrap(), 5).unwrap();
        assert!((out.get(16, 16) - 0.7).abs() < 1e-7);
        assert_eq!(out.values().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn fmt_sig_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e6"),
            (0.000123456789, "0.000123457"),
            (0.0000123456789, "1.23457e-5"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.333333"),
            (100.0, "100"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt_sig(x, 6), s);
        }
    }

    #[test]
    fn csv_is_deterministic() {
        let curve = RocCurve {
            points: vec![RocPoint { threshold: 0.1, fa: 1e-4, pd: 0.9 }, RocPoint { threshold: 0.2, fa: 0.0, pd: 2.0 / 3.0 }],
        };
        let mut a = Vec::new();
        write_roc_csv(&mut a, &curve).unwrap();
        assert_eq!(String::from_utf8(a).unwrap(), "threshold,fa,pd\n0.1,0.0001,0.9\n0.2,0,0.666667\n");
    }

    #[test]
    fn quantile_thresholds_span_the_scores() {
        let mut rng = Rng::new(15);
        let maps = vec![random_map(32, 32, &mut rng)];
        let ts = quantile_thresholds(&maps, 10);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        let c = roc(&maps, &[GroundTruth::default()], &ts, 2).unwrap();
        assert_eq!(c.points.last().unwrap().fa, 0.0);
        assert!(c.points[0].fa > 0.99);
    }

    #[test]
    fn adaptive_sweep_is_monotone() {
        let mut rng = Rng::new(16);
        let frames: Vec<GrayImage> = (0..4).map(|_| random_map(32, 32, &mut rng).normalize()).collect();
        let gts: Vec<GroundTruth> = (0..4).map(|i| GroundTruth { boxes: vec![bx(3 + i, 8, 3, 3)] }).collect();
        let ks: Vec<f64> = (1..=30).map(|i| i as f64 * 0.1).collect();
        let c = roc_adaptive(&frames, &gts, &ks, 2).unwrap();
        for p in c.points.windows(2) {
            assert!(p[1].fa <= p[0].fa);
        }
        assert_eq!(c.points.last().unwrap().fa, 0.0);
    }

    proptest! {
        #[test]
        fn fa_never_increases_with_threshold(seed in 0u64..2000) {
            let mut rng = Rng::new(seed);
            let m = random_map(16, 16, &mut rng);
            let gt = GroundTruth { boxes: vec![bx(3, 3, 3, 3)] };
            let ts: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
            let c = roc(&[m], &[gt], &ts, 2).unwrap();
            for p in c.points.windows(2) {
                prop_assert!(p[1].fa <= p[0].fa);
            }
        }
    }
}
