//! Samples, the synthetic lesion generator, augmentation, PNG I/O, dataset
//! ingestion and deterministic splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{bilinear_forward, Tensor};

/// One image with its ground-truth mask. The image is `(3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.height() || s[2] != mask.width() {
            return Err(Error::Data(format!(
                "image shape {s:?} does not match mask {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(Sample { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Stacks samples into `(B, 3, H, W)` images and `(B, 1, H, W)` 0/1 masks.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!("sample `{}` is {}x{}, batch is {h}x{w}", s.id, s.height(), s.width())));
        }
        images.extend_from_slice(s.image.data());
        masks.extend(s.mask.to_f64());
    }
    let b = samples.len();
    Ok((Tensor::new(vec![b, 3, h, w], images)?, Tensor::new(vec![b, 1, h, w], masks)?))
}

// -------------------------------------------------------------------------
// Synthetic generator
// -------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ArtifactLevel {
    None,
    #[default]
    Normal,
    Heavy,
}

impl std::str::FromStr for ArtifactLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ArtifactLevel::None),
            "normal" => Ok(ArtifactLevel::Normal),
            "heavy" => Ok(ArtifactLevel::Heavy),
            _ => Err(Error::Config(format!("unknown artifact level `{s}` (none | normal | heavy)"))),
        }
    }
}

impl std::fmt::Display for ArtifactLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArtifactLevel::None => "none",
            ArtifactLevel::Normal => "normal",
            ArtifactLevel::Heavy => "heavy",
        })
    }
}

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    /// `(k, cos coefficient, sin coefficient)` boundary harmonics.
    harmonics: Vec<(f64, f64, f64)>,
    color: [f64; 3],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64, base: [f64; 3]) -> Self {
        let harmonics = (2..=4)
            .map(|k| (k as f64, rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)))
            .collect();
        let shade = rng.gen_range(0.75..1.2);
        Blob {
            cy: rng.gen_range(0.25..0.75) * size,
            cx: rng.gen_range(0.25..0.75) * size,
            a: rng.gen_range(0.08..0.25) * size,
            b: rng.gen_range(0.08..0.25) * size,
            theta: rng.gen_range(0.0..PI),
            harmonics,
            color: base.map(|c| (c * shade).clamp(0.0, 1.0)),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let edge: f64 = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, p, q)| p * (k * phi).cos() + q * (k * phi).sin())
                .sum::<f64>();
        rho <= edge
    }
}

fn sample_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 2 + stream);
    rng
}

/// Deterministic sample `index` of the synthetic set for `seed`.
///
/// Lesion geometry, colours and skin texture come from one random stream and
/// the artifact clutter from another, so changing the artifact level leaves
/// the mask and the clean image untouched.
pub fn synthetic_sample(seed: u64, index: u64, size: usize, artifacts: ArtifactLevel) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Data(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    let mut rng = sample_rng(seed, index, 0);
    let n = size * size;
    let sz = size as f64;
    let skin = [
        rng.gen_range(0.75..0.92),
        rng.gen_range(0.55..0.72),
        rng.gen_range(0.45..0.62),
    ];
    let lesion = [
        rng.gen_range(0.30..0.50),
        rng.gen_range(0.18..0.32),
        rng.gen_range(0.12..0.25),
    ];

    // Rejection-sample blob sets until the foreground fraction is in range.
    let (blobs, owner) = loop {
        let count = rng.gen_range(1..=3);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, sz, lesion)).collect();
        let owner: Vec<Option<usize>> = (0..n)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                blobs.iter().position(|b| b.contains(y, x))
            })
            .collect();
        let frac = owner.iter().filter(|o| o.is_some()).count() as f64 / n as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (blobs, owner);
        }
    };
    let mask = Mask::from_bits(size, size, owner.iter().map(Option::is_some).collect())?;

    // Low-frequency shading plus pixel noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) * 2.0 * PI / sz,
                rng.gen_range(0.5..3.0) * 2.0 * PI / sz,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.025).expect("valid sigma");
    let mut img = vec![0.0; 3 * n];
    for i in 0..n {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let shade: f64 = waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin()).sum();
        let base = match owner[i] {
            Some(b) => blobs[b].color,
            None => skin,
        };
        for c in 0..3 {
            img[c * n + i] = base[c] + shade + noise.sample(&mut rng);
        }
    }

    let mut art = sample_rng(seed, index, 1);
    let (hairs, dots, rulers) = match artifacts {
        ArtifactLevel::None => (0, 0, 0),
        ArtifactLevel::Normal => (art.gen_range(0..=3), art.gen_range(0..=5), art.gen_range(0..=1)),
        ArtifactLevel::Heavy => (art.gen_range(4..=10), art.gen_range(5..=15), art.gen_range(1..=2)),
    };
    let paint = |y: f64, x: f64, color: [f64; 3], img: &mut [f64]| {
        let (r, c) = (y.round(), x.round());
        if r >= 0.0 && c >= 0.0 && r < sz && c < sz {
            let i = r as usize * size + c as usize;
            for ch in 0..3 {
                img[ch * n + i] = color[ch];
            }
        }
    };
    for _ in 0..hairs {
        let dark = art.gen_range(0.05..0.2);
        let (mut y, mut x) = (art.gen_range(0.0..sz), art.gen_range(0.0..sz));
        let mut heading = art.gen_range(0.0..2.0 * PI);
        for _ in 0..art.gen_range(3..=6) {
            heading += art.gen_range(-0.6..0.6);
            let len = art.gen_range(0.1..0.3) * sz;
            let steps = (len * 2.0) as usize;
            for _ in 0..steps {
                y += 0.5 * heading.sin();
                x += 0.5 * heading.cos();
                paint(y, x, [dark, dark * 0.8, dark * 0.7], &mut img);
            }
        }
    }
    for _ in 0..dots {
        let (y, x) = (art.gen_range(0.0..sz), art.gen_range(0.0..sz));
        let bright = art.gen_range(0.9..1.0);
        for (dy, dx) in [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            paint(y + dy, x + dx, [bright; 3], &mut img);
        }
    }
    for _ in 0..rulers {
        let (y0, x0) = (art.gen_range(0.0..sz), art.gen_range(0.0..sz));
        let heading = art.gen_range(0.0..2.0 * PI);
        let len = art.gen_range(0.4..0.8) * sz;
        let ink = art.gen_range(0.0..0.15);
        let (s, c) = heading.sin_cos();
        let steps = (len * 2.0) as usize;
        for k in 0..steps {
            let t = k as f64 * 0.5;
            let (y, x) = (y0 + t * s, x0 + t * c);
            paint(y, x, [ink; 3], &mut img);
            // Tick marks every four pixels.
            if k % 8 == 0 {
                for d in 1..=2 {
                    paint(y + d as f64 * c, x - d as f64 * s, [ink; 3], &mut img);
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Sample::new(format!("syn_{seed}_{index:05}"), Tensor::new(vec![3, size, size], img)?, mask)
}

pub fn generate_synthetic(seed: u64, count: usize, size: usize, artifacts: ArtifactLevel) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| synthetic_sample(seed, i, size, artifacts))
        .collect()
}

// -------------------------------------------------------------------------
// Augmentation
// -------------------------------------------------------------------------

/// Flips followed by a rotation about the image centre.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
}

/// Rounds coordinates that sit within `1e-9` of an integer onto it, so exact
/// right-angle rotations resample without interpolation error.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl Transform {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Transform {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-90.0..=90.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.angle_deg == 0.0
    }

    /// Source coordinate in the flipped image for output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        // Inverse rotation of the output offset.
        (snap(cy + co * dy - s * dx), snap(cx + s * dy + co * dx))
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        if self.is_identity() {
            return Ok(sample.clone());
        }
        let (h, w) = (sample.height(), sample.width());
        if h != w && self.angle_deg != 0.0 {
            return Err(Error::Data(format!("rotation needs a square image, got {h}x{w}")));
        }
        let n = h * w;
        let flip = |r: usize, c: usize| {
            let r = if self.flip_v { h - 1 - r } else { r };
            let c = if self.flip_h { w - 1 - c } else { c };
            r * w + c
        };
        let src_img = sample.image.data();
        let mut img = vec![0.0; 3 * n];
        let mut bits = vec![false; n];
        let means: Vec<f64> = (0..3)
            .map(|ch| src_img[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        for r in 0..h {
            for c in 0..w {
                let (y, x) = self.source(r, c, h, w);
                let out = r * w + c;
                // Mask: nearest neighbour, background outside the frame.
                let (ny, nx) = (y.round(), x.round());
                if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                    bits[out] = sample.mask.bits()[flip(ny as usize, nx as usize)];
                }
                // Image: bilinear, channel mean outside the frame.
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                for ch in 0..3 {
                    let at = |yy: f64, xx: f64| {
                        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                            src_img[ch * n + flip(yy as usize, xx as usize)]
                        } else {
                            means[ch]
                        }
                    };
                    let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
                    if fx != 0.0 {
                        v += (1.0 - fy) * fx * at(y0, x0 + 1.0);
                    }
                    if fy != 0.0 {
                        v += fy * (1.0 - fx) * at(y0 + 1.0, x0);
                        if fx != 0.0 {
                            v += fy * fx * at(y0 + 1.0, x0 + 1.0);
                        }
                    }
                    img[ch * n + out] = v;
                }
            }
        }
        Sample::new(
            sample.id.clone(),
            Tensor::new(vec![3, h, w], img)?,
            Mask::from_bits(h, w, bits)?,
        )
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    Transform::random(rng).apply(sample)
}

// -------------------------------------------------------------------------
// Image I/O
// -------------------------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes a `(3, H, W)` image as 8-bit RGB; the format follows the extension.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_rgb", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[n + i]), to_u8(d[2 * n + i])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a mask as 8-bit grayscale, 0 or 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a probability map as 8-bit grayscale.
pub fn save_gray(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("save_gray", &[height, width], &[values.len()]));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([to_u8(values[y as usize * width + x as usize])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Decodes any supported image into `(3, H, W)` values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Decodes a mask as grayscale intensities in `[0, 1]`, row-major.
pub fn load_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), h, w))
}

/// Half-pixel bilinear resize of every `(h, w)` plane.
pub fn resize_bilinear(planes: &[f64], count: usize, hw: (usize, usize), out: (usize, usize)) -> Vec<f64> {
    bilinear_forward(planes, count, hw, out)
}

/// Nearest-neighbour resize by pixel centres.
pub fn resize_nearest(values: &[f64], hw: (usize, usize), out: (usize, usize)) -> Vec<f64> {
    let (h, w) = hw;
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut res = Vec::with_capacity(out.0 * out.1);
    for r in 0..out.0 {
        let sr = pick(r, h, out.0);
        for c in 0..out.1 {
            res.push(values[sr * w + pick(c, w, out.1)]);
        }
    }
    res
}

/// Share of mask pixels allowed to sit far from both 0 and 1 before the
/// file is rejected as non-binary (anti-aliased edges stay well below it).
pub const MAX_GRAY_FRACTION: f64 = 0.05;

fn mask_from_gray(path: &Path, values: &[f64], h: usize, w: usize, size: usize) -> Result<Mask> {
    let gray = values.iter().filter(|&&v| v > 0.1 && v < 0.9).count();
    if gray as f64 > MAX_GRAY_FRACTION * values.len() as f64 {
        return Err(Error::Data(format!(
            "{}: mask is not binary ({gray} of {} pixels are mid-gray)",
            path.display(),
            values.len()
        )));
    }
    let resized = resize_nearest(values, (h, w), (size, size));
    Mask::binarize(&resized, size, size, 0.5)
}

/// Result of scanning an image/mask directory pair.
#[derive(Debug, Default)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "ppm", "pgm"];

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads every `<id>` present in both directories, resized to `size x size`.
/// Masks may be named `<id>` or `<id>_segmentation`.
pub fn ingest_isic(images: &Path, masks: &Path, size: usize) -> Result<Ingested> {
    let imgs = list_images(images)?;
    let mut msks = list_images(masks)?;
    msks = msks
        .into_iter()
        .map(|(k, v)| (k.strip_suffix("_segmentation").map(str::to_string).unwrap_or(k), v))
        .collect();
    let mut out = Ingested::default();
    let unmatched: Vec<String> = imgs
        .keys()
        .filter(|k| !msks.contains_key(*k))
        .chain(msks.keys().filter(|k| !imgs.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!("ids without an image/mask counterpart: {unmatched:?}")));
    }
    if imgs.is_empty() {
        out.warnings.push(format!("no images found in {}", images.display()));
    }
    for (id, ipath) in &imgs {
        let img = load_rgb(ipath)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let data = resize_bilinear(img.data(), 3, (h, w), (size, size));
        let mpath = &msks[id];
        let (vals, mh, mw) = load_gray(mpath)?;
        let mask = mask_from_gray(mpath, &vals, mh, mw, size)?;
        if mask.is_empty() {
            out.warnings.push(format!("{id}: empty mask"));
        }
        out.samples.push(Sample::new(id.clone(), Tensor::new(vec![3, size, size], data)?, mask)?);
    }
    Ok(out)
}

// -------------------------------------------------------------------------
// Splits and on-disk layout
// -------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

/// Index sets `(train, val, test)` of a seeded shuffle of `0..n`.
///
/// Train and validation sizes are `floor(ratio * n)`; the test set takes the
/// remainder, so 2594 items at 8:1:1 give 2075 / 259 / 260.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|&r| !(r >= 0.0)) || ((ratios.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_train = floor(spec.train);
    let n_val = floor(spec.val).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

pub fn split<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<[Vec<T>; 3]> {
    let parts = split_indices(items.len(), spec)?;
    Ok(parts.map(|p| p.into_iter().map(|i| items[i].clone()).collect()))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `images/<id>.png`, `masks/<id>.png` and a manifest of `id<TAB>split` lines.
pub fn write_dataset(dir: &Path, parts: &[(Split, &[Sample])]) -> Result<()> {
    let (idir, mdir) = (dir.join("images"), dir.join("masks"));
    for d in [&idir, &mdir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::new();
    for (split, samples) in parts {
        for s in *samples {
            save_rgb(&idir.join(format!("{}.png", s.id)), &s.image)?;
            save_mask(&mdir.join(format!("{}.png", s.id)), &s.mask)?;
            manifest.push_str(&format!("{}\t{}\n", s.id, split.name()));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`], grouped by split in manifest order.
pub fn read_dataset(dir: &Path) -> Result<BTreeMap<Split, Vec<Sample>>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `id<TAB>split`", path.display(), n + 1)))?;
        let split: Split = split.trim().parse()?;
        let image = load_rgb(&dir.join("images").join(format!("{id}.png")))?;
        let mpath = dir.join("masks").join(format!("{id}.png"));
        let (vals, h, w) = load_gray(&mpath)?;
        if (h, w) != (image.shape()[1], image.shape()[2]) {
            return Err(Error::Data(format!(
                "`{id}`: mask is {h}x{w} but image is {}x{}",
                image.shape()[1],
                image.shape()[2]
            )));
        }
        let mask = Mask::binarize(&vals, h, w, 0.5)?;
        out.entry(split).or_default().push(Sample::new(id, image, mask)?);
    }
    Ok(out)
}
