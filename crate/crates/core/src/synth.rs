//! Synthetic training data: implant resized, brightness-jittered target
//! templates into backgrounds by pixelwise max, and record the target image
//! and the count of successful implants.
//!
//! Backgrounds and fused values are kept on the 16-bit grid `k / 65535`, so
//! a tuple written as 16-bit PGM reads back with the same positive-pixel
//! support in `f_T`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{connected_components, Mask};
use crate::error::{Error, Result};
use crate::image::{GrayImage, PgmDepth};
use crate::rng::Rng;

const GRID: f64 = 65535.0;

/// Top-left corner `(x0, y0)` (column, row) and extents of a target box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct FusionLocation {
    pub x0: usize,
    pub y0: usize,
    pub h0: usize,
    pub w0: usize,
}

impl From<[usize; 4]> for FusionLocation {
    fn from([x0, y0, h0, w0]: [usize; 4]) -> Self {
        Self { x0, y0, h0, w0 }
    }
}

impl From<FusionLocation> for [usize; 4] {
    fn from(l: FusionLocation) -> Self {
        [l.x0, l.y0, l.h0, l.w0]
    }
}

impl FusionLocation {
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.h0 > 0 && self.w0 > 0 && self.x0 + self.w0 <= width && self.y0 + self.h0 <= height
    }

    /// True when the boxes are separated by at least `margin` empty pixels
    /// along some axis.
    pub fn separated(&self, other: &FusionLocation, margin: usize) -> bool {
        self.x0 + self.w0 + margin <= other.x0
            || other.x0 + other.w0 + margin <= self.x0
            || self.y0 + self.h0 + margin <= other.y0
            || other.y0 + other.h0 + margin <= self.y0
    }

    /// Integer centre pixel `(x, y)`.
    pub fn center(&self) -> (usize, usize) {
        (self.x0 + (self.w0 - 1) / 2, self.y0 + (self.h0 - 1) / 2)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w0 && y >= self.y0 && y < self.y0 + self.h0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub f_d: GrayImage,
    pub f_t: GrayImage,
    pub y_t: usize,
    /// Boxes of the successful implants.
    pub boxes: Vec<FusionLocation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Empty pixels required between any two boxes.
    pub margin: usize,
    pub placement_attempts: usize,
    pub alpha_lo: f32,
    pub alpha_hi: f32,
    /// Fresh attempts per tuple before it is skipped.
    pub tuple_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            min_size: 2,
            max_size: 10,
            margin: 2,
            placement_attempts: 100,
            alpha_lo: 0.75,
            alpha_hi: 1.0,
            tuple_attempts: 50,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "target size range [{}, {}] is empty",
                self.min_size, self.max_size
            )));
        }
        if !(0.0 < self.alpha_lo && self.alpha_lo <= self.alpha_hi && self.alpha_hi <= 1.0) {
            return Err(Error::Config("brightness factor range must lie in (0, 1]".into()));
        }
        if self.placement_attempts == 0 || self.tuple_attempts == 0 {
            return Err(Error::Config("attempt limits must be positive".into()));
        }
        Ok(())
    }
}

fn quantize(v: f32) -> f32 {
    ((v as f64 * GRID).round() / GRID) as f32
}

pub fn quantize_image(img: &GrayImage) -> GrayImage {
    GrayImage::new(
        img.width(),
        img.height(),
        img.pixels().iter().map(|&v| quantize(v)).collect(),
    )
    .expect("quantisation keeps pixels in [0, 1]")
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: "resize target must be non-empty".into(),
        });
    }
    let (sw, sh) = (img.width(), img.height());
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, sh);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, sw);
            let p = |xx, yy| img.get(xx, yy) as f64;
            let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
            let bot = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
            out.push(((1.0 - fy) * top + fy * bot).clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(width, height, out)
}

#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub image: GrayImage,
    pub fused_pixels: usize,
    pub success: bool,
    pub alpha: f32,
}

/// Implants template `t` into the box `loc` of `f_b`: the template is
/// resized to the box, scaled by `α ~ U[lo, hi]`, and written wherever it is
/// brighter than the background. Success needs more than one such pixel.
pub fn fuse_one(f_b: &GrayImage, t: &GrayImage, loc: FusionLocation, rng: &mut Rng) -> Result<FuseOutcome> {
    fuse_with(f_b, t, loc, rng, 0.75, 1.0, false)
}

fn fuse_with(
    f_b: &GrayImage,
    t: &GrayImage,
    loc: FusionLocation,
    rng: &mut Rng,
    alpha_lo: f32,
    alpha_hi: f32,
    on_grid: bool,
) -> Result<FuseOutcome> {
    if !loc.fits(f_b.width(), f_b.height()) {
        return Err(Error::OutOfRange(format!(
            "fusion box {:?} outside {}x{} image",
            loc,
            f_b.width(),
            f_b.height()
        )));
    }
    let alpha = rng.uniform(alpha_lo, alpha_hi);
    let r = resize(t, loc.w0, loc.h0)?;
    let mut image = f_b.clone();
    let mut fused_pixels = 0;
    for dy in 0..loc.h0 {
        for dx in 0..loc.w0 {
            let mut v = alpha * r.get(dx, dy);
            if on_grid {
                v = quantize(v);
            }
            let (x, y) = (loc.x0 + dx, loc.y0 + dy);
            if v > f_b.get(x, y) {
                image.set(x, y, v);
                fused_pixels += 1;
            }
        }
    }
    Ok(FuseOutcome {
        image,
        fused_pixels,
        success: fused_pixels > 1,
        alpha,
    })
}

fn difference(f_d: &GrayImage, f_b: &GrayImage) -> GrayImage {
    let px = f_d
        .pixels()
        .iter()
        .zip(f_b.pixels())
        .map(|(&d, &b)| (d - b).max(0.0))
        .collect();
    GrayImage::new(f_d.width(), f_d.height(), px).expect("difference of unit-range images")
}

/// Draws `n` pairwise-separated boxes by rejection sampling.
pub fn place_boxes(width: usize, height: usize, n: usize, cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<FusionLocation>> {
    let mut boxes: Vec<FusionLocation> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let h0 = rng.int_inclusive(cfg.min_size, cfg.max_size);
            let w0 = rng.int_inclusive(cfg.min_size, cfg.max_size);
            if h0 > height || w0 > width {
                continue;
            }
            let cand = FusionLocation {
                x0: rng.int_inclusive(0, width - w0),
                y0: rng.int_inclusive(0, height - h0),
                h0,
                w0,
            };
            if boxes.iter().all(|b| b.separated(&cand, cfg.margin)) {
                placed = Some(cand);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::Placement {
            requested: n,
            width,
            height,
        })?);
    }
    Ok(boxes)
}

/// Builds one tuple with `n_t` implant attempts (`n_t = 0` gives the
/// negative tuple `(f_B, 0, 0)`). An implant counts only if more than one
/// pixel was fused and the fused pixels form a single 8-connected blob;
/// otherwise it is rolled back so every target in `f_T` is labelled.
pub fn make_tuple(f_b: &GrayImage, n_t: usize, templates: &[GrayImage], cfg: &SynthConfig, rng: &mut Rng) -> Result<TrainingTuple> {
    cfg.validate()?;
    if n_t >= cfg.classes {
        return Err(Error::OutOfRange(format!(
            "n_t = {n_t} but only {} classes",
            cfg.classes
        )));
    }
    if n_t > 0 && templates.is_empty() {
        return Err(Error::Empty("target template set"));
    }
    let f_b = quantize_image(f_b);
    let (w, h) = (f_b.width(), f_b.height());
    let locs = place_boxes(w, h, n_t, cfg, rng)?;
    let mut f_d = f_b.clone();
    let mut boxes = Vec::new();
    for loc in locs {
        let t = &templates[rng.index(templates.len())];
        let out = fuse_with(&f_d, t, loc, rng, cfg.alpha_lo, cfg.alpha_hi, true)?;
        if out.success && single_blob(&out.image, &f_d, loc) {
            f_d = out.image;
            boxes.push(loc);
        }
    }
    let f_t = difference(&f_d, &f_b);
    Ok(TrainingTuple {
        f_d,
        f_t,
        y_t: boxes.len(),
        boxes,
    })
}

fn single_blob(fused: &GrayImage, before: &GrayImage, loc: FusionLocation) -> bool {
    let bits = (0..loc.h0)
        .flat_map(|dy| (0..loc.w0).map(move |dx| (loc.x0 + dx, loc.y0 + dy)))
        .map(|(x, y)| fused.get(x, y) > before.get(x, y))
        .collect();
    Mask::new(loc.w0, loc.h0, bits).map_or(false, |m| connected_components(&m).len() == 1)
}

/// Isotropic Gaussian blob, scaled so the brightest pixel equals `amplitude`.
pub fn gaussian_template(sigma: f32, amplitude: f32, extent: usize) -> Result<GrayImage> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if !(amplitude > 0.0 && amplitude <= 1.0) || extent == 0 {
        return Err(Error::Config("amplitude must lie in (0, 1] and extent be positive".into()));
    }
    let c = (extent as f64 - 1.0) / 2.0;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (0..extent * extent)
        .map(|i| {
            let (x, y) = ((i % extent) as f64 - c, (i / extent) as f64 - c);
            (-(x * x + y * y) / s2).exp()
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    GrayImage::new(
        extent,
        extent,
        raw.iter().map(|v| (v / peak * amplitude as f64) as f32).collect(),
    )
}

pub fn default_templates() -> Vec<GrayImage> {
    [2.0, 2.5, 3.0, 3.5]
        .iter()
        .map(|&s| gaussian_template(s, 1.0, 9).expect("valid template parameters"))
        .collect()
}

/// Smooth clutter: bilinear value noise on a coarse lattice, a linear
/// gradient and faint pixel noise around a random base level.
pub fn builtin_background(width: usize, height: usize, rng: &mut Rng) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: "background must be non-empty".into(),
        });
    }
    let base = rng.uniform(0.05, 0.3) as f64;
    let cell = 16.0;
    let (gw, gh) = ((width as f64 / cell).ceil() as usize + 2, (height as f64 / cell).ceil() as usize + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.uniform(-0.075, 0.075) as f64).collect();
    let angle = rng.uniform(0.0, std::f32::consts::TAU) as f64;
    let slope = rng.uniform(0.0, 0.1) as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let norm = width.max(height) as f64;
    let mut px = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / cell, y as f64 / cell);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let l = |i: usize, j: usize| lattice[j * gw + i];
            let smooth = (1.0 - ty) * ((1.0 - tx) * l(ix, iy) + tx * l(ix + 1, iy))
                + ty * ((1.0 - tx) * l(ix, iy + 1) + tx * l(ix + 1, iy + 1));
            let ramp = slope * ((x as f64 - width as f64 / 2.0) * ca + (y as f64 - height as f64 / 2.0) * sa) / norm;
            let fine = rng.uniform(-0.01, 0.01) as f64;
            px.push(((base + smooth + ramp + fine).clamp(0.0, 1.0)) as f32);
        }
    }
    Ok(quantize_image(&GrayImage::new(width, height, px)?))
}

/// Where dataset backgrounds come from.
#[derive(Debug, Clone)]
pub enum BackgroundSource {
    Images(Vec<GrayImage>),
    Builtin { width: usize, height: usize },
}

impl BackgroundSource {
    fn draw(&self, rng: &mut Rng) -> Result<GrayImage> {
        match self {
            BackgroundSource::Images(v) => {
                if v.is_empty() {
                    return Err(Error::Empty("background set"));
                }
                Ok(v[rng.index(v.len())].clone())
            }
            BackgroundSource::Builtin { width, height } => builtin_background(*width, *height, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub tuple: TrainingTuple,
    pub seed_index: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    /// `(seed_index, reason)` of tuples that could not be produced.
    pub skipped: Vec<(u64, String)>,
}

impl Dataset {
    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in &self.entries {
            c[e.tuple.y_t] += 1;
        }
        c
    }
}

/// Generates `counts[c]` tuples labelled `c` for each class. Tuple `i` uses
/// its own stream `derive(seed, i)`, so the output is independent of worker
/// count. Tuples that keep failing are skipped; more than 10 % skipped is
/// an error.
pub fn make_dataset(
    backgrounds: &BackgroundSource,
    templates: &[GrayImage],
    counts: &[usize],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if counts.len() != cfg.classes {
        return Err(Error::Config(format!(
            "{} class counts given for {} classes",
            counts.len(),
            cfg.classes
        )));
    }
    if let BackgroundSource::Images(v) = backgrounds {
        if v.is_empty() {
            return Err(Error::Empty("background set"));
        }
    }
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect();
    let results: Vec<(u64, Result<TrainingTuple>)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let i = i as u64;
            (i, tuple_with_label(backgrounds, templates, label, cfg, &mut Rng::derive(seed, i)))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (i, r) in results {
        match r {
            Ok(tuple) => entries.push(DatasetEntry { tuple, seed_index: i }),
            Err(e @ (Error::Placement { .. } | Error::Numerical(_))) => {
                log::warn!("skipping tuple {i}: {e}");
                skipped.push((i, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if skipped.len() * 10 > labels.len() {
        return Err(Error::Numerical(format!(
            "{} of {} tuples could not be synthesised",
            skipped.len(),
            labels.len()
        )));
    }
    Ok(Dataset { entries, skipped })
}

fn tuple_with_label(
    backgrounds: &BackgroundSource,
    templates: &[GrayImage],
    label: usize,
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Result<TrainingTuple> {
    let mut last = None;
    for _ in 0..cfg.tuple_attempts {
        let f_b = backgrounds.draw(rng)?;
        match make_tuple(&f_b, label, templates, cfg, rng) {
            Ok(t) if t.y_t == label => return Ok(t),
            Ok(_) => {}
            Err(e @ Error::Placement { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| {
        Error::Numerical(format!(
            "no attempt produced {label} successful implants after {} tries",
            cfg.tuple_attempts
        ))
    }))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(rename = "f_D")]
    pub f_d: String,
    #[serde(rename = "f_T")]
    pub f_t: String,
    #[serde(rename = "y_T")]
    pub y_t: usize,
    pub boxes: Vec<FusionLocation>,
    pub seed_index: u64,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes 16-bit PGMs and `manifest.jsonl` (paths relative to `dir`).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for e in &data.entries {
        let d = format!("{:06}_d.pgm", e.seed_index);
        let t = format!("{:06}_t.pgm", e.seed_index);
        e.tuple.f_d.write_pgm(dir.join(&d), PgmDepth::Sixteen)?;
        e.tuple.f_t.write_pgm(dir.join(&t), PgmDepth::Sixteen)?;
        let rec = ManifestRecord {
            f_d: d,
            f_t: t,
            y_t: e.tuple.y_t,
            boxes: e.tuple.boxes.clone(),
            seed_index: e.seed_index,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Loads a dataset directory (or a manifest file) written by
/// [`write_dataset`].
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>> {
    let (dir, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")), path.to_path_buf())
    };
    let recs = read_manifest(&manifest)?;
    if recs.is_empty() {
        return Err(Error::Empty("dataset manifest"));
    }
    recs.into_iter()
        .map(|r| {
            let f_d = GrayImage::read_pgm(dir.join(&r.f_d))?;
            let f_t = GrayImage::read_pgm(dir.join(&r.f_t))?;
            if (f_d.width(), f_d.height()) != (f_t.width(), f_t.height()) {
                return Err(Error::format("manifest", format!("{} and {} differ in size", r.f_d, r.f_t)));
            }
            Ok(DatasetEntry {
                tuple: TrainingTuple {
                    f_d,
                    f_t,
                    y_t: r.y_t,
                    boxes: r.boxes,
                },
                seed_index: r.seed_index,
            })
        })
        .collect()
}

/// All `.pgm` files of a directory in file-name order.
pub fn load_pgm_dir(dir: &Path) -> Result<Vec<GrayImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths.iter().map(GrayImage::read_pgm).collect()
}
