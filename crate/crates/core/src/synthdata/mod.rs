//! Synthetic lesion scenes and on-disk datasets.
//!
//! A scene is a smooth textured background with one or more bright,
//! soft-edged elliptical lesions and optional dimmer lesion-like
//! distractors. The mask marks pixels whose lesion weight exceeds 0.5;
//! distractors never enter it.

pub mod pnm;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgeo::BinaryMask;
use crate::tensor::Tensor;
use pnm::Raster;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub lesions: (usize, usize),
    /// Semi-axis range in pixels for ordinary lesions.
    pub radius: (f64, f64),
    /// Probability that a lesion is drawn from `small_radius` instead.
    pub small_fraction: f64,
    pub small_radius: (f64, f64),
    pub distractors: (usize, usize),
    pub lesion_contrast: f64,
    pub distractor_contrast: f64,
    /// Width of the soft edge ramp in pixels.
    pub edge: f64,
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            lesions: (1, 3),
            radius: (4.0, 10.0),
            small_fraction: 0.3,
            small_radius: (3.0, 4.5),
            distractors: (0, 2),
            lesion_contrast: 0.35,
            distractor_contrast: 0.15,
            edge: 1.5,
            noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.size < 8 {
            return bad("size must be >= 8");
        }
        if self.lesions.0 > self.lesions.1 || self.distractors.0 > self.distractors.1 {
            return bad("count ranges must satisfy min <= max");
        }
        for (lo, hi) in [self.radius, self.small_radius] {
            if !(lo >= 2.0 && lo <= hi) {
                return bad("radii must be >= 2 with min <= max");
            }
            if 2.0 * hi + 2.0 >= self.size as f64 {
                return bad("radius too large for the image");
            }
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return bad("small_fraction must lie in [0, 1]");
        }
        if !(self.distractor_contrast >= 0.0 && self.distractor_contrast < self.lesion_contrast) {
            return bad("distractor contrast must be >= 0 and strictly below lesion contrast");
        }
        if !(self.edge > 0.0 && self.noise >= 0.0) {
            return bad("edge must be positive and noise nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Blob {
    /// Normalised elliptical radius; `< 1` inside the ellipse.
    fn rho(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Radial ramp: 1 deep inside, 0.5 exactly on the ellipse.
    fn weight(&self, r: f64, c: f64, edge: f64) -> f64 {
        let rad = self.rx.min(self.ry);
        let t = (1.0 - self.rho(r, c)) * rad / edge;
        (0.5 + t).clamp(0.0, 1.0)
    }

    fn reach(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

/// One image/mask pair; the image is `C×H×W` with values `k/255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

fn draw_blob<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, small: bool) -> Blob {
    let (lo, hi) = if small { spec.small_radius } else { spec.radius };
    let ry = rng.random_range(lo..=hi);
    let rx = rng.random_range(lo..=hi);
    let reach = ry.max(rx) + 1.0;
    let n = spec.size as f64;
    Blob {
        cy: rng.random_range(reach..n - reach),
        cx: rng.random_range(reach..n - reach),
        ry,
        rx,
        angle: rng.random_range(0.0..PI),
    }
}

/// Deterministic given the generator state.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let nf = n as f64;
    let (f1, f2) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let base = rng.random_range(0.25..0.4);
    let count = rng.random_range(spec.lesions.0..=spec.lesions.1).max(1);
    let lesions: Vec<Blob> = (0..count)
        .map(|_| {
            let small = rng.random_bool(spec.small_fraction);
            draw_blob(spec, rng, small)
        })
        .collect();
    let mut distractors = Vec::new();
    let wanted = rng.random_range(spec.distractors.0..=spec.distractors.1);
    for _ in 0..wanted {
        for _attempt in 0..20 {
            let small = rng.random_bool(spec.small_fraction);
            let d = draw_blob(spec, rng, small);
            let clear = lesions.iter().chain(&distractors).all(|l: &Blob| {
                let gap = ((l.cy - d.cy).powi(2) + (l.cx - d.cx).powi(2)).sqrt();
                gap > l.reach() + d.reach() + 2.0 * spec.edge + 1.0
            });
            if clear {
                distractors.push(d);
                break;
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut bits = vec![0u8; n * n];
    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64, c as f64);
            let bg = base
                + 0.06 * (2.0 * PI * f1 * x / nf + p1).sin()
                + 0.05 * (2.0 * PI * f2 * y / nf + p2).cos();
            let lw = lesions.iter().map(|b| b.weight(y, x, spec.edge)).fold(0.0, f64::max);
            let dw = distractors.iter().map(|b| b.weight(y, x, spec.edge)).fold(0.0, f64::max);
            let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let v = bg + spec.lesion_contrast * lw + spec.distractor_contrast * dw + eps;
            data[r * n + c] = quantise(v);
            // distractors are separated from lesions, so dw never marks a pixel
            bits[r * n + c] = u8::from(lw > 0.5);
        }
    }
    Ok(Sample {
        image: Tensor::new([1, n, n], data)?,
        mask: BinaryMask::from_bits(n, n, bits)?,
    })
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Which split a generated sample belongs to; the split picks a disjoint
/// generator stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

/// Generator for sample `index` of `split`; streams never overlap.
pub fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

pub fn generate_split(spec: &SceneSpec, seed: u64, split: Split, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| generate_scene(spec, &mut scene_rng(seed, split, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub split: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// File listing of a dataset directory; paths are relative to it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    /// Free-form provenance lines (generator spec and seed).
    pub notes: Vec<String>,
}

const MANIFEST: &str = "manifest.csv";

pub fn sample_to_rasters(s: &Sample) -> Result<(Raster, Raster)> {
    let shape = s.image.shape();
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    if ch != 1 && ch != 3 {
        return Err(Error::Config(format!("{ch}-channel images cannot be stored")));
    }
    let d = s.image.data();
    let mut samples = Vec::with_capacity(ch * h * w);
    for i in 0..h * w {
        for c in 0..ch {
            samples.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let image = Raster {
        width: w,
        height: h,
        channels: ch,
        samples,
    };
    let mask = mask_raster(&s.mask);
    Ok((image, mask))
}

pub fn mask_raster(m: &BinaryMask) -> Raster {
    Raster {
        width: m.width(),
        height: m.height(),
        channels: 1,
        samples: m.bits().iter().map(|&b| b * 255).collect(),
    }
}

pub fn image_from_raster(r: &Raster) -> Result<Tensor> {
    let (h, w, ch) = (r.height, r.width, r.channels);
    let mut data = vec![0.0; ch * h * w];
    for i in 0..h * w {
        for c in 0..ch {
            data[c * h * w + i] = r.samples[i * ch + c] as f64 / 255.0;
        }
    }
    Tensor::new([ch, h, w], data)
}

pub fn mask_from_raster(r: &Raster, path: &Path) -> Result<BinaryMask> {
    if r.channels != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: "mask must be a single-channel PGM".into(),
        });
    }
    let mut bits = Vec::with_capacity(r.samples.len());
    for &v in &r.samples {
        bits.push(match v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Contract(format!(
                    "{}: mask value {other} is neither 0 nor 255",
                    path.display()
                )))
            }
        });
    }
    BinaryMask::from_bits(r.height, r.width, bits)
}

/// Writes images, masks and `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, splits: &[(&str, &[Sample])], notes: &[String]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        notes: notes.to_vec(),
    };
    for (split, samples) in splits {
        for (i, s) in samples.iter().enumerate() {
            let (img, mask) = sample_to_rasters(s)?;
            let ext = if img.channels == 1 { "pgm" } else { "ppm" };
            let image = PathBuf::from(format!("{split}_{i:05}_image.{ext}"));
            let mask_path = PathBuf::from(format!("{split}_{i:05}_mask.pgm"));
            pnm::write(&dir.join(&image), &img)?;
            pnm::write(&dir.join(&mask_path), &mask)?;
            manifest.entries.push(DatasetEntry {
                split: split.to_string(),
                image,
                mask: mask_path,
            });
        }
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    let mut text = String::new();
    for n in &m.notes {
        text.push_str(&format!("# {n}\n"));
    }
    text.push_str("split,image,mask\n");
    for e in &m.entries {
        text.push_str(&format!("{},{},{}\n", e.split, e.image.display(), e.mask.display()));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m = DatasetManifest::default();
    let mut offset = 0;
    let mut header = false;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if let Some(note) = line.strip_prefix('#') {
            m.notes.push(note.trim().to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if !header {
            if line != "split,image,mask" {
                return Err(Error::Parse {
                    path,
                    offset: here,
                    msg: "expected header split,image,mask".into(),
                });
            }
            header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path,
                offset: here,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        m.entries.push(DatasetEntry {
            split: fields[0].to_string(),
            image: PathBuf::from(fields[1]),
            mask: PathBuf::from(fields[2]),
        });
    }
    Ok(m)
}

/// Loads every entry of `split` (all entries when `None`). Every listed
/// file is checked before any is decoded.
pub fn read_dataset(dir: &Path, split: Option<&str>) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let chosen: Vec<&DatasetEntry> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    for e in &chosen {
        for p in [&e.image, &e.mask] {
            let full = dir.join(p);
            if !full.exists() {
                return Err(Error::MissingFile(full));
            }
        }
    }
    let mut samples = Vec::with_capacity(chosen.len());
    for e in chosen {
        let image = image_from_raster(&pnm::read(&dir.join(&e.image))?)?;
        let mpath = dir.join(&e.mask);
        let mask = mask_from_raster(&pnm::read(&mpath)?, &mpath)?;
        if (image.shape()[1], image.shape()[2]) != mask.dims() {
            return Err(Error::shape("dataset", format!("{} and its mask differ in size", e.image.display())));
        }
        samples.push(Sample { image, mask });
    }
    Ok((manifest, samples))
}
