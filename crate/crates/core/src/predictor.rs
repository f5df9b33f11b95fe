//! Small differentiable classifiers over flattened pixels, the
//! cross-entropy loss with analytic gradients, and SGD with momentum under a
//! cosine learning-rate schedule.
//!
//! Parameters live in one flat vector `theta`. For the one-hidden-layer
//! network the layout is `W1 (H x D) | b1 (H) | W2 (C x H) | b2 (C)`; the
//! linear model is `W (C x D) | b (C)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{arg, Error, Result};

/// A differentiable classifier with a flat parameter vector.
pub trait Predictor: Send + Sync {
    fn num_params(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Seeded initial parameters.
    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;
    /// Class scores for one input.
    fn forward(&self, theta: &[f64], x: &[f64], logits: &mut [f64]);
    /// Cross-entropy of one example; accumulates `scale * grad` into `grad`.
    fn example_loss_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        label: usize,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> f64;
}

/// Architecture descriptor; also the default [`Predictor`] implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Multinomial logistic regression.
    Linear {
        width: usize,
        height: usize,
        channels: usize,
        classes: usize,
    },
    /// One ReLU hidden layer.
    Mlp {
        width: usize,
        height: usize,
        channels: usize,
        hidden: usize,
        classes: usize,
    },
}

pub const DEFAULT_HIDDEN: usize = 64;

impl Architecture {
    pub fn mlp(
        width: usize,
        height: usize,
        channels: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        Architecture::Mlp {
            width,
            height,
            channels,
            hidden,
            classes,
        }
    }

    pub fn linear(width: usize, height: usize, channels: usize, classes: usize) -> Self {
        Architecture::Linear {
            width,
            height,
            channels,
            classes,
        }
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        match *self {
            Architecture::Linear {
                width,
                height,
                channels,
                ..
            }
            | Architecture::Mlp {
                width,
                height,
                channels,
                ..
            } => (width, height, channels),
        }
    }

    fn hidden(&self) -> usize {
        match *self {
            Architecture::Linear { .. } => 0,
            Architecture::Mlp { hidden, .. } => hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h, c) = self.image_dims();
        if w == 0 || h == 0 || c == 0 || self.num_classes() < 2 {
            return arg("architecture needs positive dims and >= 2 classes");
        }
        if matches!(self, Architecture::Mlp { hidden: 0, .. }) {
            return arg("hidden width must be positive");
        }
        Ok(())
    }
}

impl Predictor for Architecture {
    fn num_params(&self) -> usize {
        let d = self.input_dim();
        let c = self.num_classes();
        match *self {
            Architecture::Linear { .. } => c * d + c,
            Architecture::Mlp { hidden, .. } => hidden * d + hidden + c * hidden + c,
        }
    }

    fn num_classes(&self) -> usize {
        match *self {
            Architecture::Linear { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    fn input_dim(&self) -> usize {
        let (w, h, c) = self.image_dims();
        w * h * c
    }

    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.input_dim();
        let c = self.num_classes();
        let mut theta = vec![0.0; self.num_params()];
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in slice {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        };
        match *self {
            Architecture::Linear { .. } => fill(&mut theta[..c * d], d),
            Architecture::Mlp { hidden, .. } => {
                fill(&mut theta[..hidden * d], d);
                let w2 = hidden * d + hidden;
                fill(&mut theta[w2..w2 + c * hidden], hidden);
            }
        }
        theta
    }

    fn forward(&self, theta: &[f64], x: &[f64], logits: &mut [f64]) {
        let d = self.input_dim();
        let c = self.num_classes();
        match *self {
            Architecture::Linear { .. } => affine(&theta[..c * d], &theta[c * d..], x, logits),
            Architecture::Mlp { hidden, .. } => {
                let mut act = vec![0.0; hidden];
                let (w1, rest) = theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(c * hidden);
                affine(w1, b1, x, &mut act);
                act.iter_mut().for_each(|a| *a = a.max(0.0));
                affine(w2, b2, &act, logits);
            }
        }
    }

    fn example_loss_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        label: usize,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let d = self.input_dim();
        let c = self.num_classes();
        let h = self.hidden();
        let mut act = vec![0.0; h];
        let mut z = vec![0.0; c];
        match *self {
            Architecture::Linear { .. } => affine(&theta[..c * d], &theta[c * d..], x, &mut z),
            Architecture::Mlp { .. } => {
                let (w1, rest) = theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                affine(w1, b1, x, &mut act);
                act.iter_mut().for_each(|a| *a = a.max(0.0));
                affine(w2, b2, &act, &mut z);
            }
        }
        // log-softmax
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let Some(grad) = grad else {
            return loss;
        };
        let mut dz: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        dz[label] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= scale);
        match *self {
            Architecture::Linear { .. } => {
                let (gw, gb) = grad.split_at_mut(c * d);
                outer_acc(gw, gb, &dz, x);
            }
            Architecture::Mlp { .. } => {
                let w2 = &theta[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                outer_acc(gw2, gb2, &dz, &act);
                let mut dh = vec![0.0; h];
                for (j, &g) in dz.iter().enumerate() {
                    let row = &w2[j * h..(j + 1) * h];
                    for (dhi, wi) in dh.iter_mut().zip(row) {
                        *dhi += g * wi;
                    }
                }
                for (dhi, a) in dh.iter_mut().zip(&act) {
                    if *a <= 0.0 {
                        *dhi = 0.0;
                    }
                }
                outer_acc(gw1, gb1, &dh, x);
            }
        }
        loss
    }
}

/// `out = W x + b` with `W` row-major `out.len() x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `gw += dy x^T`, `gb += dy`, skipping zero rows.
fn outer_acc(gw: &mut [f64], gb: &mut [f64], dy: &[f64], x: &[f64]) {
    let d = x.len();
    for (i, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[i] += g;
        for (w, xi) in gw[i * d..(i + 1) * d].iter_mut().zip(x) {
            *w += g * xi;
        }
    }
}

fn check_batch<P: Predictor + ?Sized>(model: &P, theta: &[f64], batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return arg("empty batch");
    }
    if theta.len() != model.num_params() {
        return arg(format!(
            "theta has {} entries, model expects {}",
            theta.len(),
            model.num_params()
        ));
    }
    for ex in batch {
        if ex.label >= model.num_classes() {
            return arg(format!("label {} out of range", ex.label));
        }
        if ex.image.len() != model.input_dim() {
            return arg("image size does not match the model input");
        }
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn loss<P: Predictor + ?Sized>(model: &P, theta: &[f64], batch: &[Example]) -> Result<f64> {
    check_batch(model, theta, batch)?;
    let total: f64 = batch
        .iter()
        .map(|ex| model.example_loss_grad(theta, ex.image.pixels(), ex.label, 0.0, None))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its exact gradient in `theta` (no weight decay).
pub fn loss_and_grad<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    batch: &[Example],
) -> Result<(f64, Vec<f64>)> {
    check_batch(model, theta, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut g = vec![0.0; theta.len()];
    let mut total = 0.0;
    for ex in batch {
        total += model.example_loss_grad(theta, ex.image.pixels(), ex.label, scale, Some(&mut g));
    }
    Ok((total * scale, g))
}

/// Gradient of the mean loss plus `weight_decay * theta`.
pub fn grad<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    batch: &[Example],
    weight_decay: f64,
) -> Result<Vec<f64>> {
    let (_, mut g) = loss_and_grad(model, theta, batch)?;
    add_weight_decay(&mut g, theta, weight_decay);
    Ok(g)
}

pub fn add_weight_decay(g: &mut [f64], theta: &[f64], weight_decay: f64) {
    if weight_decay != 0.0 {
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += weight_decay * t;
        }
    }
}

/// Predicted class of one input.
pub fn predict<P: Predictor + ?Sized>(model: &P, theta: &[f64], x: &[f64]) -> usize {
    let mut z = vec![0.0; model.num_classes()];
    model.forward(theta, x, &mut z);
    z.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Fraction of correctly classified examples.
pub fn accuracy<P: Predictor + ?Sized>(model: &P, theta: &[f64], data: &[Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|ex| predict(model, theta, ex.image.pixels()) == ex.label)
        .count();
    hits as f64 / data.len() as f64
}

/// SGD-with-momentum state and its cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub momentum_buffer: Vec<f64>,
    pub step: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl OptimState {
    pub fn new(
        num_params: usize,
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) {
            return arg("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&momentum) {
            return arg("momentum must lie in [0, 1)");
        }
        if !(weight_decay >= 0.0) {
            return arg("weight_decay must be nonnegative");
        }
        Ok(Self {
            momentum_buffer: vec![0.0; num_params],
            step: 0,
            base_lr,
            momentum,
            weight_decay,
            total_steps,
        })
    }

    /// `base_lr * (1 + cos(pi * t / total)) / 2`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = t.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Zeroes the buffer and restarts the schedule over `total_steps`.
    pub fn restart(&mut self, total_steps: usize) {
        self.momentum_buffer.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
        self.total_steps = total_steps;
    }
}

/// One momentum step in place: `buf = momentum * buf + g`,
/// `theta -= lr(t) * buf`.
pub fn sgd_step(theta: &mut [f64], g: &[f64], opt: &mut OptimState) -> Result<()> {
    if g.len() != theta.len() || opt.momentum_buffer.len() != theta.len() {
        return arg("gradient, parameter and buffer lengths differ");
    }
    if opt.step >= opt.total_steps {
        return arg(format!(
            "schedule exhausted: step {} of {}",
            opt.step, opt.total_steps
        ));
    }
    let lr = opt.lr_at(opt.step);
    for ((t, b), gi) in theta.iter_mut().zip(opt.momentum_buffer.iter_mut()).zip(g) {
        *b = opt.momentum * *b + gi;
        *t -= lr * *b;
    }
    opt.step += 1;
    Ok(())
}

/// A parameter vector tied to its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AUGTHETA";

impl PredictorParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.num_params() {
            return arg("theta length does not match the architecture");
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite parameters".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let theta = arch.init(rng);
        Ok(Self { arch, theta })
    }

    /// Rounds every parameter to `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.theta.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    /// Checkpoint: magic, descriptor as six u32 (kind, width, height,
    /// channels, hidden, classes), u32 count, then f32 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (width, height, channels) = self.arch.image_dims();
        let kind = match self.arch {
            Architecture::Linear { .. } => 0u32,
            Architecture::Mlp { .. } => 1u32,
        };
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            kind,
            width as u32,
            height as u32,
            channels as u32,
            self.arch.hidden() as u32,
            self.arch.num_classes() as u32,
            self.theta.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &t in &self.theta {
            w.write_all(&(t as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 8 {
            return Err(fmt(bytes.len(), "truncated magic"));
        }
        if let Some(i) = (0..8).find(|&i| bytes[i] != CHECKPOINT_MAGIC[i]) {
            return Err(fmt(i, "bad checkpoint magic"));
        }
        if bytes.len() < 8 + 28 {
            return Err(fmt(bytes.len(), "truncated descriptor"));
        }
        let word = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let arch = match word(0) {
            0 => Architecture::linear(word(1), word(2), word(3), word(5)),
            1 => Architecture::mlp(word(1), word(2), word(3), word(4), word(5)),
            _ => return Err(fmt(8, "unknown architecture kind")),
        };
        arch.validate()
            .map_err(|e| fmt(12, &format!("bad descriptor: {e}")))?;
        let count = word(6);
        if count != arch.num_params() {
            return Err(fmt(32, "parameter count does not match descriptor"));
        }
        let body = &bytes[36..];
        if body.len() != 4 * count {
            return Err(fmt(36 + body.len().min(4 * count), "body length mismatch"));
        }
        let theta = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        PredictorParams::new(arch, theta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
