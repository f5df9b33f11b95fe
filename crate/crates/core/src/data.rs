//! Datasets, deterministic splits, the AUGD binary format and synthetic
//! tasks whose useful and harmful augmentations are known in advance.
//!
//! AUGD layout (little-endian):
//!
//! ```text
//! "AUGD" | version u8 | n u32 | width u32 | height u32 | channels u32 |
//! num_classes u32 | labels u8[n] | pixels u8[n * width * height * channels]
//! ```
//!
//! Pixels are stored as `round(v * 255)` and read back as `byte / 255`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};
use crate::raster::Image;

pub const AUGD_MAGIC: &[u8; 4] = b"AUGD";
pub const AUGD_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 5 * 4;

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {l} >= num_classes {num_classes}"
            )));
        }
        if let Some(first) = images.first() {
            let dims = (first.width(), first.height(), first.channels());
            if images
                .iter()
                .any(|im| (im.width(), im.height(), im.channels()) != dims)
            {
                return Err(Error::Validation("images differ in dimensions".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(width, height, channels)` of the stored images.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|im| (im.width(), im.height(), im.channels()))
    }

    pub fn example(&self, i: usize) -> Example {
        Example {
            image: self.images[i].clone(),
            label: self.labels[i],
        }
    }

    pub fn examples(&self) -> Vec<Example> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenation of two datasets with the same class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_classes != other.num_classes {
            return arg("cannot concatenate datasets with different class counts");
        }
        let mut images = self.images.clone();
        images.extend(other.images.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        Dataset::new(images, labels, self.num_classes)
    }

    /// Draws `size` distinct examples uniformly (all of them, shuffled, if
    /// `size >= len`).
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<Example> {
        rand::seq::index::sample(rng, self.len(), size.min(self.len()))
            .into_iter()
            .map(|i| self.example(i))
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (width, height, channels) = self.dims().unwrap_or((0, 0, 0));
        if self.num_classes > 256 {
            return arg("AUGD stores labels as u8; at most 256 classes");
        }
        w.write_all(AUGD_MAGIC)?;
        w.write_all(&[AUGD_VERSION])?;
        for v in [self.len(), width, height, channels, self.num_classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        w.write_all(&labels)?;
        for im in &self.images {
            let bytes: Vec<u8> = im.pixels().iter().map(|&v| to_byte(v)).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated magic"));
        }
        if let Some(i) = (0..4).find(|&i| bytes[i] != AUGD_MAGIC[i]) {
            return Err(fmt(i, "bad magic, expected \"AUGD\""));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if bytes[4] != AUGD_VERSION {
            return Err(fmt(4, "unsupported version"));
        }
        let field = |i: usize| {
            let o = 5 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (n, width, height, channels, num_classes) =
            (field(0), field(1), field(2), field(3), field(4));
        if n > 0 && (width == 0 || height == 0 || channels == 0) {
            return Err(fmt(9, "zero image dimension"));
        }
        let per_image = width * height * channels;
        let expected = HEADER_LEN + n + n * per_image;
        if bytes.len() < expected {
            return Err(fmt(bytes.len(), "truncated body"));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, "trailing bytes after body"));
        }
        let labels: Vec<usize> = bytes[HEADER_LEN..HEADER_LEN + n]
            .iter()
            .map(|&b| b as usize)
            .collect();
        let body = &bytes[HEADER_LEN + n..];
        let images = body
            .chunks_exact(per_image.max(1))
            .take(n)
            .map(|c| {
                Image::new(
                    width,
                    height,
                    channels,
                    c.iter().map(|&b| b as f64 / 255.0).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(images, labels, num_classes)
    }

    /// Reads CSV rows of `label, p_0, ..., p_{whc-1}` with pixels in `0..=255`.
    pub fn from_csv<R: Read>(
        reader: R,
        width: usize,
        height: usize,
        channels: usize,
        num_classes: usize,
    ) -> Result<Dataset> {
        let per_image = width * height * channels;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Validation(format!("csv row {row}: {e}")))?;
            if rec.len() != per_image + 1 {
                return Err(Error::Validation(format!(
                    "csv row {row}: expected {} fields, got {}",
                    per_image + 1,
                    rec.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Validation(format!("csv row {row}: {e}")))
            };
            let label = parse(&rec[0])?;
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::Validation(format!(
                    "csv row {row}: bad label {label}"
                )));
            }
            let pixels = rec
                .iter()
                .skip(1)
                .map(|s| {
                    let v = parse(s)?;
                    if !(0.0..=255.0).contains(&v) {
                        return Err(Error::Validation(format!(
                            "csv row {row}: pixel {v} outside 0..=255"
                        )));
                    }
                    Ok(v.round() / 255.0)
                })
                .collect::<Result<Vec<_>>>()?;
            images.push(Image::new(width, height, channels, pixels)?);
            labels.push(label as usize);
        }
        Dataset::new(images, labels, num_classes)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mirrors each example left-right with probability 1/2. Optional
/// preprocessing that sits outside the learned policy.
pub fn random_hflip<R: Rng + ?Sized>(batch: &mut [Example], rng: &mut R) {
    for ex in batch {
        if rng.random_bool(0.5) {
            ex.image = ex.image.flip_horizontal();
        }
    }
}

/// Train, validation and test parts of a task.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Splits `data` into train/val with [`split`] and attaches `test`.
    pub fn new(data: &Dataset, test: Dataset, ratio: f64, seed: u64) -> Result<Splits> {
        let (train, val) = split(data, ratio, seed)?;
        Ok(Splits { train, val, test })
    }

    /// Train and validation parts joined back together, in that order.
    pub fn full_train(&self) -> Result<Dataset> {
        self.train.concat(&self.val)
    }
}

/// Shuffled partition of `data`: the second part holds
/// `floor(n * (1 - ratio))` examples and the first part the rest.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return arg("cannot split an empty dataset");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return arg(format!("split ratio {ratio} outside (0, 1)"));
    }
    let (first, second) = split_indices(data.len(), ratio, seed);
    Ok((data.subset(&first), data.subset(&second)))
}

/// Index-level partition behind [`split`].
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_second = (n as f64 * (1.0 - ratio)).floor() as usize;
    let second = idx.split_off(n - n_second);
    (idx, second)
}

/// Synthetic task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Noisy elliptical rings; the class is (ring size, polarity) and every
    /// example is rotated by a random angle. Rotation preserves the class,
    /// inversion turns a bright-ring image into a dark-ring one of the other
    /// polarity class.
    RotationInvariant,
    /// Stripe textures; the class is (orientation, frequency) and the texture
    /// window is jittered in position.
    TranslationInvariant,
}

impl SyntheticKind {
    pub const ROTATION: &'static str = "rotation-invariant";
    pub const TRANSLATION: &'static str = "translation-invariant";

    pub fn num_classes(self) -> usize {
        4
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::RotationInvariant => Self::ROTATION,
            SyntheticKind::TranslationInvariant => Self::TRANSLATION,
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            Self::ROTATION => Ok(SyntheticKind::RotationInvariant),
            Self::TRANSLATION => Ok(SyntheticKind::TranslationInvariant),
            other => arg(format!("unknown synthetic dataset kind {other:?}")),
        }
    }
}

/// Generates a balanced single-channel synthetic dataset.
///
/// Labels cycle through the classes, so the histogram is exact whenever
/// `n` is a multiple of the class count. Pixel values are quantized to
/// multiples of 1/255 so that AUGD round trips are exact.
pub fn generate_synthetic(
    kind: SyntheticKind,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    let classes = kind.num_classes();
    if n < 4 * classes {
        return arg(format!("need at least {} examples", 4 * classes));
    }
    if side < 8 {
        return arg("synthetic images need side >= 8");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let px = match kind {
            SyntheticKind::RotationInvariant => render_ring(label, side, &mut rng),
            SyntheticKind::TranslationInvariant => render_stripes(label, side, &mut rng),
        };
        let px = px.into_iter().map(|v| to_byte(v) as f64 / 255.0).collect();
        images.push(Image::new(side, side, 1, px)?);
        labels.push(label);
    }
    Dataset::new(images, labels, classes)
}

const NOISE: f64 = 0.08;
const RING_NOISE: f64 = 0.35;

fn render_ring(label: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let large = label % 2 == 1;
    let bright = label < 2;
    let radius = if large { 0.3 } else { 0.22 } * s * rng.random_range(0.9..1.1);
    let aspect = rng.random_range(0.45..0.65);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let c = (s - 1.0) / 2.0;
    let width = 0.06 * s;
    let (fg, bg) = if bright { (0.7, 0.3) } else { (0.3, 0.7) };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            // canonical frame of the rotated ellipse
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let r = (u * u + (v / aspect) * (v / aspect)).sqrt();
            let ring = (-0.5 * ((r - radius) / width).powi(2)).exp();
            let e: f64 = StandardNormal.sample(rng);
            out.push((bg + (fg - bg) * ring + RING_NOISE * e).clamp(0.0, 1.0));
        }
    }
    out
}

fn render_stripes(label: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let horizontal = label.is_multiple_of(2);
    let period = if label < 2 { 3.0 } else { 6.0 } * s / 16.0;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let win = 0.3 * s;
    let cx = rng.random_range(win..s - win);
    let cy = rng.random_range(win..s - win);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let coord = if horizontal { y as f64 } else { x as f64 };
            let wave = (std::f64::consts::TAU * coord / period + phase).sin();
            let dx = (x as f64 - cx) / win;
            let dy = (y as f64 - cy) / win;
            let envelope = (-(dx * dx + dy * dy)).exp();
            let e: f64 = StandardNormal.sample(rng);
            out.push((0.5 + 0.4 * envelope * wave + NOISE * e).clamp(0.0, 1.0));
        }
    }
    out
}
