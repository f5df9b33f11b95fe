//! Images and the pool of elementary transformations.
//!
//! Pixels are stored channel-major (`[c][y][x]`) as `f64` in `[0, 1]`.
//! Every transform takes a normalized magnitude in `[0, 1]`, which is mapped
//! affinely onto the transform's native range, plus a direction sign for the
//! transforms that have a natural symmetric counterpart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return arg("image dimensions must be positive");
        }
        if pixels.len() != width * height * channels {
            return arg(format!(
                "expected {} pixels for {width}x{height}x{channels}, got {}",
                width * height * channels,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return arg(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Number of scalar values, i.e. the flattened input dimension.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Left-right mirror image.
    pub fn flip_horizontal(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..self.channels {
            for y in 0..h {
                out.extend((0..w).rev().map(|x| self.get(c, y, x)));
            }
        }
        self.same_shape(out)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.pixels[c * n..(c + 1) * n]
    }

    fn same_shape(&self, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            pixels,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.same_shape(self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect())
    }

    /// Bilinear sample with zero fill outside the frame.
    fn sample_bilinear(&self, c: usize, sx: f64, sy: f64) -> f64 {
        let sx = snap(sx);
        let sy = snap(sy);
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                0.0
            } else {
                self.get(c, y as usize, x as usize)
            }
        };
        let mut v = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                v += wy * wx * at(x0 + dx, y0 + dy);
            }
        }
        v
    }

    /// Resamples through an inverse coordinate map given in centered
    /// coordinates: `(x, y)` of the output maps to source `inverse(x, y)`.
    fn warp(&self, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (sx, sy) = inverse(x as f64 - cx, y as f64 - cy);
                    out.push(self.sample_bilinear(c, sx + cx, sy + cy).clamp(0.0, 1.0));
                }
            }
        }
        self.same_shape(out)
    }

    /// Per-pixel luminance (the image itself for one channel).
    fn luminance(&self) -> Vec<f64> {
        let n = self.width * self.height;
        if self.channels < 3 {
            return self.plane(0).to_vec();
        }
        (0..n)
            .map(|i| {
                0.299 * self.pixels[i] + 0.587 * self.pixels[n + i] + 0.114 * self.pixels[2 * n + i]
            })
            .collect()
    }
}

/// Rounds coordinates that are within float noise of an integer, so that
/// exact grid maps (quarter turns, integer shifts) sample exact pixels.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformId {
    Identity,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Equalize,
    Invert,
    Solarize,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    Color,
    Cutout,
    RandomCrop,
}

impl TransformId {
    pub const ALL: [TransformId; 17] = [
        TransformId::Identity,
        TransformId::ShearX,
        TransformId::ShearY,
        TransformId::TranslateX,
        TransformId::TranslateY,
        TransformId::Rotate,
        TransformId::AutoContrast,
        TransformId::Equalize,
        TransformId::Invert,
        TransformId::Solarize,
        TransformId::Posterize,
        TransformId::Contrast,
        TransformId::Brightness,
        TransformId::Sharpness,
        TransformId::Color,
        TransformId::Cutout,
        TransformId::RandomCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformId::Identity => "Identity",
            TransformId::ShearX => "ShearX",
            TransformId::ShearY => "ShearY",
            TransformId::TranslateX => "TranslateX",
            TransformId::TranslateY => "TranslateY",
            TransformId::Rotate => "Rotate",
            TransformId::AutoContrast => "AutoContrast",
            TransformId::Equalize => "Equalize",
            TransformId::Invert => "Invert",
            TransformId::Solarize => "Solarize",
            TransformId::Posterize => "Posterize",
            TransformId::Contrast => "Contrast",
            TransformId::Brightness => "Brightness",
            TransformId::Sharpness => "Sharpness",
            TransformId::Color => "Color",
            TransformId::Cutout => "Cutout",
            TransformId::RandomCrop => "RandomCrop",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn spec(self) -> TransformSpec {
        use TransformId::*;
        let (native_range, parameter_free, directional) = match self {
            Identity | AutoContrast | Equalize | Invert => ((0.0, 0.0), true, false),
            ShearX | ShearY => ((0.0, 1.0), false, true),
            TranslateX | TranslateY => ((0.0, 0.75), false, true),
            Rotate => ((0.0, 90.0), false, true),
            Solarize => ((0.0, 255.0), false, false),
            Posterize => ((2.0, 8.0), false, false),
            Contrast | Brightness | Sharpness | Color => ((0.0, 0.99), false, true),
            Cutout => ((0.0, 1.0), false, false),
            RandomCrop => ((0.0, 0.5), false, false),
        };
        TransformSpec {
            id: self,
            native_range,
            parameter_free,
            directional,
        }
    }

    pub fn is_parameter_free(self) -> bool {
        self.spec().parameter_free
    }

    pub fn is_directional(self) -> bool {
        self.spec().directional
    }
}

impl std::fmt::Display for TransformId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Static description of one elementary transformation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub id: TransformId,
    /// `(low, high)` in native units (degrees, bits, image fractions, ...).
    pub native_range: (f64, f64),
    pub parameter_free: bool,
    pub directional: bool,
}

/// The default pool: 15 standard transforms plus Cutout and RandomCrop.
pub fn registry() -> Vec<TransformSpec> {
    TransformId::ALL.iter().map(|t| t.spec()).collect()
}

/// Maps a normalized magnitude onto the transform's native range.
///
/// Posterize and Solarize run in reverse: a larger magnitude means fewer
/// bits and a lower threshold. Posterize bit counts are rounded.
pub fn magnitude_to_native(spec: &TransformSpec, m01: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&m01), "magnitude {m01} outside [0, 1]");
    let (lo, hi) = spec.native_range;
    match spec.id {
        TransformId::Posterize => (hi - m01 * (hi - lo)).round(),
        TransformId::Solarize => hi - m01 * (hi - lo),
        _ => lo + m01 * (hi - lo),
    }
}

/// Applies one elementary transformation.
///
/// `m01` must already be clamped to `[0, 1]`; `direction` is `±1` and is
/// ignored by non-directional transforms. The rng is consumed only by
/// Cutout and RandomCrop placement.
pub fn apply_transform<R: Rng + ?Sized>(
    spec: &TransformSpec,
    m01: f64,
    direction: i8,
    image: &Image,
    rng: &mut R,
) -> Image {
    use TransformId::*;
    let native = magnitude_to_native(spec, m01);
    let sign = if spec.directional && direction < 0 {
        -1.0
    } else {
        1.0
    };
    let w = image.width as f64;
    let h = image.height as f64;
    match spec.id {
        Identity => image.clone(),
        ShearX => {
            let s = sign * native;
            image.warp(|x, y| (x + s * y, y))
        }
        ShearY => {
            let s = sign * native;
            image.warp(|x, y| (x, y + s * x))
        }
        TranslateX => {
            let d = sign * native * w;
            image.warp(|x, y| (x - d, y))
        }
        TranslateY => {
            let d = sign * native * h;
            image.warp(|x, y| (x, y - d))
        }
        Rotate => {
            let theta = (sign * native).to_radians();
            let (s, c) = theta.sin_cos();
            // output = R(theta) * source, so source = R(-theta) * output
            image.warp(|x, y| (c * x + s * y, -s * x + c * y))
        }
        AutoContrast => auto_contrast(image),
        Equalize => equalize(image),
        Invert => image.map(|v| 1.0 - v),
        Solarize => {
            let t = native / 255.0;
            image.map(|v| if v > t { 1.0 - v } else { v })
        }
        Posterize => {
            let bits = native as u32;
            let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
            image.map(|v| ((v * 255.0).round().clamp(0.0, 255.0) as u8 & mask) as f64 / 255.0)
        }
        Contrast => {
            let lum = image.luminance();
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            blend(image, |_| mean, 1.0 + sign * native)
        }
        Brightness => blend(image, |_| 0.0, 1.0 + sign * native),
        Sharpness => {
            let smooth = smoothed(image);
            blend(image, |i| smooth[i], 1.0 + sign * native)
        }
        Color => {
            let lum = image.luminance();
            let n = lum.len();
            blend(image, |i| lum[i % n], 1.0 + sign * native)
        }
        Cutout => cutout(image, native, rng),
        RandomCrop => random_crop(image, native, rng),
    }
}

/// `degenerate + factor * (x - degenerate)` with the factor clamped at 0.
fn blend(image: &Image, degenerate: impl Fn(usize) -> f64, factor: f64) -> Image {
    let factor = factor.max(0.0);
    image.same_shape(
        image
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = degenerate(i);
                (d + factor * (v - d)).clamp(0.0, 1.0)
            })
            .collect(),
    )
}

fn auto_contrast(image: &Image) -> Image {
    let mut out = image.pixels.clone();
    let n = image.width * image.height;
    for c in 0..image.channels {
        let plane = &mut out[c * n..(c + 1) * n];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in plane.iter_mut() {
                *v = ((*v - lo) * scale).clamp(0.0, 1.0);
            }
        }
    }
    image.same_shape(out)
}

/// Rank-based histogram equalization per channel.
///
/// Each distinct value `v` maps to `(cdf(v) - cdf_min) / (n - cdf_min)`,
/// where `cdf(v)` counts pixels `<= v`. The output depends only on the
/// counts of each distinct level and their order, both of which the map
/// preserves, so a second application is exactly the identity.
fn equalize(image: &Image) -> Image {
    let mut out = image.pixels.clone();
    let n = image.width * image.height;
    for c in 0..image.channels {
        let plane = &mut out[c * n..(c + 1) * n];
        let mut sorted = plane.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lowest = sorted[0];
        let cdf_min = sorted.partition_point(|&v| v <= lowest);
        if cdf_min == n {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        for v in plane.iter_mut() {
            let cdf = sorted.partition_point(|&s| s <= *v);
            *v = ((cdf - cdf_min) as f64 / denom).clamp(0.0, 1.0);
        }
    }
    image.same_shape(out)
}

/// 3x3 smoothing with center weight 5; border pixels are kept.
fn smoothed(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let mut out = image.pixels.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for c in 0..image.channels {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 4.0 * image.get(c, y, x);
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += image.get(c, y + dy - 1, x + dx - 1);
                    }
                }
                out[(c * h + y) * w + x] = acc / 13.0;
            }
        }
    }
    out
}

const CUTOUT_FILL: f64 = 0.5;

fn cutout<R: Rng + ?Sized>(image: &Image, fraction: f64, rng: &mut R) -> Image {
    let (w, h) = (image.width, image.height);
    let side = (fraction * w.min(h) as f64).round() as i64;
    let cx = rng.random_range(0..w) as i64;
    let cy = rng.random_range(0..h) as i64;
    if side == 0 {
        return image.clone();
    }
    let x0 = cx - side / 2;
    let y0 = cy - side / 2;
    let mut out = image.pixels.clone();
    for c in 0..image.channels {
        for y in y0.max(0)..(y0 + side).min(h as i64) {
            for x in x0.max(0)..(x0 + side).min(w as i64) {
                out[(c * h + y as usize) * w + x as usize] = CUTOUT_FILL;
            }
        }
    }
    image.same_shape(out)
}

/// Zero-pads each side by `fraction * dim` pixels, then crops a random
/// window of the original size.
fn random_crop<R: Rng + ?Sized>(image: &Image, fraction: f64, rng: &mut R) -> Image {
    let (w, h) = (image.width, image.height);
    let px = (fraction * w as f64).round() as i64;
    let py = (fraction * h as f64).round() as i64;
    let ox = rng.random_range(0..=2 * px);
    let oy = rng.random_range(0..=2 * py);
    if px == 0 && py == 0 {
        return image.clone();
    }
    let mut out = Vec::with_capacity(image.pixels.len());
    for c in 0..image.channels {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let sx = x + ox - px;
                let sy = y + oy - py;
                let v = if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    0.0
                } else {
                    image.get(c, sy as usize, sx as usize)
                };
                out.push(v);
            }
        }
    }
    image.same_shape(out)
}
