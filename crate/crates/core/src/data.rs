//! Image/mask datasets: directory and manifest loading, training
//! augmentation, and a synthetic shapes generator.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageBatch, STRIDES};
use crate::imageio::{binarize_codes, list_images, read_gray, read_rgb};
use crate::losses::GroundTruthMask;
use crate::{Error, Result};

const DIVISOR: usize = STRIDES[STRIDES.len() - 1];

/// One training example: `H x W x 3` image in `[0, 1]` and a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Array3<f64>, mask: Array2<f64>) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 || mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "image {:?} does not match mask {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if let Some(&v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(v));
        }
        Ok(SamplePair {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    /// Files that failed to load, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Ids present on only one side.
    pub missing: Vec<String>,
}

impl Dataset {
    pub fn from_pairs(pairs: Vec<SamplePair>) -> Self {
        Dataset {
            pairs,
            ..Dataset::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    /// Stacks the given samples into model inputs.
    pub fn batch(&self, indices: &[usize]) -> Result<(ImageBatch, GroundTruthMask)> {
        stack(indices.iter().map(|&i| &self.pairs[i]))
    }
}

/// Stacks samples of equal size into an image batch and mask batch.
pub fn stack<'a>(pairs: impl IntoIterator<Item = &'a SamplePair>) -> Result<(ImageBatch, GroundTruthMask)> {
    let (images, masks): (Vec<_>, Vec<_>) = pairs.into_iter().map(|p| (p.image.clone(), p.mask.clone())).unzip();
    if images.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    Ok((ImageBatch::stack(&images)?, GroundTruthMask::stack(&masks)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    /// Rotation angle drawn uniformly from `[-d, d]` degrees.
    pub rotation_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// `[height, width]` every sample is resized to when loading.
    pub resize_to: [usize; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip_prob: 0.5,
            rotation_degrees: 15.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            resize_to: [320, 320],
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentationConfig {
            hflip_prob: 0.0,
            rotation_degrees: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::Config("rotation_degrees must lie in [0, 180]".into()));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        let [h, w] = self.resize_to;
        if h == 0 || w == 0 || h % DIVISOR != 0 || w % DIVISOR != 0 {
            return Err(Error::Config(format!("resize_to {h}x{w} must be a positive multiple of {DIVISOR}")));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.hflip_prob == 0.0
            && self.rotation_degrees == 0.0
            && self.brightness == 0.0
            && self.contrast == 0.0
            && self.saturation == 0.0
    }
}

fn load_one(id: &str, image: &Path, mask: &Path, size: Option<(usize, usize)>) -> Result<SamplePair> {
    let img = read_rgb(image, size)?;
    let (h, w, _) = img.dim();
    let codes = read_gray(mask, Some((h, w)))?;
    let mask = binarize_codes(&codes).mapv(|b| b as u8 as f64);
    SamplePair::new(id, img, mask)
}

fn load_all(entries: Vec<(String, PathBuf, PathBuf)>, size: Option<(usize, usize)>, missing: Vec<String>) -> Dataset {
    let loaded: Vec<Result<SamplePair>> = entries
        .par_iter()
        .map(|(id, img, mask)| load_one(id, img, mask, size))
        .collect();
    let mut ds = Dataset {
        missing,
        ..Dataset::default()
    };
    for ((id, _, _), r) in entries.into_iter().zip(loaded) {
        match r {
            Ok(p) => ds.pairs.push(p),
            Err(e) => {
                log::warn!("skipping `{id}`: {e}");
                ds.skipped.push((id, e.to_string()));
            }
        }
    }
    if ds.is_empty() {
        log::warn!("dataset is empty");
    }
    ds
}

/// Loads image/mask pairs matched by file stem, sorted by id. Masks are
/// binarized at code 128 and resized with nearest-neighbour sampling;
/// images are resized bilinearly.
pub fn load_pairs(image_dir: &Path, mask_dir: &Path, resize_to: Option<(usize, usize)>) -> Result<Dataset> {
    let images = list_images(image_dir)?;
    let masks = list_images(mask_dir)?;
    let mut missing = Vec::new();
    for id in images.keys().filter(|k| !masks.contains_key(*k)) {
        log::warn!("image `{id}` has no mask");
        missing.push(id.clone());
    }
    for id in masks.keys().filter(|k| !images.contains_key(*k)) {
        log::warn!("mask `{id}` has no image");
        missing.push(id.clone());
    }
    missing.sort();
    let entries = images
        .into_iter()
        .filter_map(|(id, img)| masks.get(&id).map(|m| (id, img, m.clone())))
        .collect();
    Ok(load_all(entries, resize_to, missing))
}

/// Loads pairs listed in a two-column CSV (image path, mask path). Relative
/// paths resolve against the manifest's directory; an optional header row
/// starting with `image` is skipped.
pub fn load_manifest(manifest: &Path, resize_to: Option<(usize, usize)>) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let mut entries = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
        if record.len() != 2 {
            return Err(Error::Data(format!(
                "{} row {}: expected 2 columns, found {}",
                manifest.display(),
                row + 1,
                record.len()
            )));
        }
        if row == 0 && record[0].eq_ignore_ascii_case("image") {
            continue;
        }
        let img = base.join(&record[0]);
        let mask = base.join(&record[1]);
        let id = img
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        entries.push((id, img, mask));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(load_all(entries, resize_to, Vec::new()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Per-sample generator derived from the global seed, the sample id and the
/// epoch, so worker scheduling cannot change what a sample sees.
pub fn sample_rng(seed: u64, id: &str, epoch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(id.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Random flip, rotation and colour jitter. The geometric transforms are
/// applied identically to image and mask; the mask is re-binarized after
/// resampling. The generator is always advanced by the same amount.
pub fn augment(pair: &SamplePair, cfg: &AugmentationConfig, rng: &mut impl Rng) -> SamplePair {
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    let angle = (rng.random::<f64>() * 2.0 - 1.0) * cfg.rotation_degrees;
    let jitter = [
        1.0 + (rng.random::<f64>() * 2.0 - 1.0) * cfg.brightness,
        1.0 + (rng.random::<f64>() * 2.0 - 1.0) * cfg.contrast,
        1.0 + (rng.random::<f64>() * 2.0 - 1.0) * cfg.saturation,
    ];

    let mut image = pair.image.clone();
    let mut mask = pair.mask.clone();
    if flip {
        image.invert_axis(Axis(1));
        mask.invert_axis(Axis(1));
    }
    if angle != 0.0 {
        image = rotate(&image, angle);
        let m3 = rotate(&mask.clone().insert_axis(Axis(2)), angle);
        mask = m3.index_axis(Axis(2), 0).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    }
    if cfg.brightness > 0.0 {
        image.mapv_inplace(|v| (v * jitter[0]).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 {
        let mean = image.mean().unwrap_or(0.0);
        image.mapv_inplace(|v| ((v - mean) * jitter[1] + mean).clamp(0.0, 1.0));
    }
    if cfg.saturation > 0.0 {
        for mut px in image.lanes_mut(Axis(2)) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.mapv_inplace(|v| ((v - gray) * jitter[2] + gray).clamp(0.0, 1.0));
        }
    }
    SamplePair {
        id: pair.id.clone(),
        image,
        mask,
    }
}

/// Rotates about the image centre with bilinear sampling; pixels mapped
/// from outside the frame are zero.
fn rotate(img: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            // inverse map output pixel to source
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for (oy, ox, wgt) in [
                (0, 0, (1.0 - fy) * (1.0 - fx)),
                (0, 1, (1.0 - fy) * fx),
                (1, 0, fy * (1.0 - fx)),
                (1, 1, fy * fx),
            ] {
                let (yy, xx) = (y0 as i64 + oy, x0 as i64 + ox);
                if wgt == 0.0 || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    continue;
                }
                for ch in 0..c {
                    out[[y, x, ch]] += wgt * img[[yy as usize, xx as usize, ch]];
                }
            }
        }
    }
    out
}

/// Foreground-ratio buckets the generator cycles through.
pub const SYNTH_BUCKETS: [(f64, f64); 3] = [(0.01, 0.05), (0.05, 0.3), (0.3, 0.6)];
const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy)]
struct Shape {
    ellipse: bool,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    sin: f64,
    cos: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (self.cos * dx + self.sin * dy) / self.rx;
        let v = (-self.sin * dx + self.cos * dy) / self.ry;
        if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }

    fn random(rng: &mut ChaCha8Rng, size: usize, area: f64) -> Shape {
        let ellipse = rng.random_bool(0.5);
        let aspect: f64 = rng.random_range(0.5..2.0);
        // area of the unit shape: pi for an ellipse, 4 for a rectangle
        let unit = if ellipse { std::f64::consts::PI } else { 4.0 };
        let r = (area / unit).sqrt();
        let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        let reach = rx.max(ry).min(size as f64 / 2.0);
        let lo = reach;
        let hi = (size as f64 - reach).max(lo + 1e-9);
        Shape {
            ellipse,
            cx: rng.random_range(lo..hi),
            cy: rng.random_range(lo..hi),
            rx,
            ry,
            sin,
            cos,
        }
    }
}

fn in_bucket(ratio: f64, bucket: usize) -> bool {
    let (lo, hi) = SYNTH_BUCKETS[bucket];
    match bucket {
        0 => ratio >= lo && ratio < hi,
        1 => ratio >= lo && ratio <= hi,
        _ => ratio > lo && ratio <= hi,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn synth_one(index: usize, size: usize, seed: u64) -> SamplePair {
    let mut rng = sample_rng(seed, &format!("synth{index}"), 0);
    let bucket = index % SYNTH_BUCKETS.len();
    let (lo, hi) = SYNTH_BUCKETS[bucket];
    let total = (size * size) as f64;
    let mut shapes = Vec::new();
    let mut mask = Array2::zeros((size, size));
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.random_range(lo..hi);
        let count = rng.random_range(1..=3);
        shapes = (0..count)
            .map(|_| Shape::random(&mut rng, size, target * total / count as f64))
            .collect::<Vec<_>>();
        mask = Array2::from_shape_fn((size, size), |(y, x)| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            shapes.iter().any(|s| s.contains(px, py)) as u8 as f64
        });
        if in_bucket(mask.sum() / total, bucket) {
            break;
        }
    }

    let bg = random_color(&mut rng);
    let mut fg = random_color(&mut rng);
    while (0..3).map(|c| (fg[c] - bg[c]).abs()).sum::<f64>() / 3.0 < 0.3 {
        fg = random_color(&mut rng);
    }
    let grad = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut image = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    hits += shapes.iter().any(|s| s.contains(px, py)) as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let shade = grad[0] * (x as f64 / size as f64 - 0.5) + grad[1] * (y as f64 / size as f64 - 0.5);
            for c in 0..3 {
                let noise = rng.random_range(-0.02..0.02);
                let v = bg[c] * (1.0 - cover) + fg[c] * cover + shade + noise;
                image[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    SamplePair {
        id: format!("synth_{index:05}"),
        image,
        mask,
    }
}

/// Generates `count` images with one to three anti-aliased ellipses or
/// rectangles. Sample `i` targets foreground-ratio bucket `i % 3` of
/// [`SYNTH_BUCKETS`]; the mask is the exact rasterization (pixel centres).
pub fn synth_generate(count: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("synthetic count must be at least 1".into()));
    }
    if image_size == 0 || image_size % DIVISOR != 0 {
        return Err(Error::Config(format!("synthetic size {image_size} must be a positive multiple of {DIVISOR}")));
    }
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| synth_one(i, image_size, seed))
        .collect();
    Ok(Dataset::from_pairs(pairs))
}

/// Writes a dataset as `images/<id>.png` and `masks/<id>.png`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for p in &ds.pairs {
        crate::imageio::write_rgb(&images.join(format!("{}.png", p.id)), &p.image)?;
        crate::imageio::write_gray(&masks.join(format!("{}.png", p.id)), &p.mask.mapv(|v| (v * 255.0) as u8))?;
    }
    Ok(())
}
