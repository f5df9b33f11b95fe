//! The stochastic augmentation policy.
//!
//! A policy draws `K` slots independently. Slot `k` picks a transform from
//! `softmax(logits[k])`, then a magnitude `m = u + e` with
//! `u ~ Uniform[0, mu_i]` and `e ~ Normal(0, sigma^2)`, and finally a
//! direction sign for directional transforms. The magnitude law has density
//!
//! ```text
//! p(m) = (1 / mu) * (Phi((mu - m) / sigma) - Phi(-m / sigma))
//! ```
//!
//! which is what [`magnitude_density`], [`Policy::log_prob`] and
//! [`Policy::score`] use. Raw magnitudes may leave `[0, 1]`; they are clamped
//! only when a transform is applied.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::raster::{apply_transform, Image, TransformId};
use crate::stats::{normal_interval, normal_pdf};

/// Lower bound of the feasible magnitude upper-bounds.
pub const MU_MIN: f64 = 0.05;
/// Default magnitude smoothing deviation.
pub const DEFAULT_SIGMA: f64 = 0.1;
/// Default initial magnitude upper-bound.
pub const DEFAULT_MU_INIT: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_slots: usize,
    transforms: Vec<TransformId>,
    /// Row-major `K x N`.
    logits: Vec<f64>,
    mag_upper: Vec<f64>,
    sigma: f64,
}

/// One sampled slot of a composite augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub transform: usize,
    /// Raw sample; clamp to `[0, 1]` before applying.
    pub magnitude: f64,
    pub direction: i8,
}

/// A sampled composite augmentation, applied slot by slot in order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeAugmentation {
    pub slots: Vec<Slot>,
}

/// Gradient with respect to `(logits, mag_upper)`, shaped like a [`Policy`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient {
    pub num_slots: usize,
    /// Row-major `K x N`.
    pub d_logits: Vec<f64>,
    pub d_mag: Vec<f64>,
}

impl PolicyGradient {
    pub fn zeros(num_slots: usize, n: usize) -> Self {
        Self {
            num_slots,
            d_logits: vec![0.0; num_slots * n],
            d_mag: vec![0.0; n],
        }
    }

    pub fn zeros_like(policy: &Policy) -> Self {
        Self::zeros(policy.num_slots, policy.num_transforms())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyGradient, scale: f64) {
        debug_assert_eq!(self.d_logits.len(), other.d_logits.len());
        for (a, b) in self.d_logits.iter_mut().zip(&other.d_logits) {
            *a += scale * b;
        }
        for (a, b) in self.d_mag.iter_mut().zip(&other.d_mag) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.d_logits.iter_mut().for_each(|v| *v *= s);
        self.d_mag.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.d_logits
            .iter()
            .chain(&self.d_mag)
            .all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.d_logits
            .iter()
            .chain(&self.d_mag)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Density of the smoothed-uniform magnitude law on `[0, mu]`.
pub fn magnitude_density(mu: f64, sigma: f64, m: f64) -> f64 {
    normal_interval(-m / sigma, (mu - m) / sigma) / mu
}

/// `d/d mu log p(m)`.
fn magnitude_score(mu: f64, sigma: f64, m: f64) -> f64 {
    let hi = (mu - m) / sigma;
    let mass = normal_interval(-m / sigma, hi);
    -1.0 / mu + normal_pdf(hi) / (sigma * mass)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_softmax(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

impl Policy {
    /// A policy that samples every transform uniformly in every slot.
    pub fn uniform(num_slots: usize, transforms: &[TransformId], mu_init: f64) -> Result<Self> {
        if num_slots == 0 {
            return arg("policy needs at least one slot");
        }
        if transforms.len() < 2 {
            return arg("policy needs at least two transforms");
        }
        if !(MU_MIN..=1.0).contains(&mu_init) {
            return arg(format!("mu_init {mu_init} outside [{MU_MIN}, 1]"));
        }
        Ok(Self {
            num_slots,
            transforms: transforms.to_vec(),
            logits: vec![0.0; num_slots * transforms.len()],
            mag_upper: vec![mu_init; transforms.len()],
            sigma: DEFAULT_SIGMA,
        })
    }

    /// Builds a policy from raw parts, validating every invariant.
    pub fn from_parts(
        num_slots: usize,
        transforms: Vec<TransformId>,
        logits: Vec<f64>,
        mag_upper: Vec<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let n = transforms.len();
        if num_slots == 0 || n < 2 {
            return arg("policy needs K >= 1 and N >= 2");
        }
        if logits.len() != num_slots * n || mag_upper.len() != n {
            return arg("logit/magnitude shapes do not match K and N");
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return arg("non-finite logits");
        }
        if let Some(mu) = mag_upper.iter().find(|m| !(MU_MIN..=1.0).contains(*m)) {
            return arg(format!("magnitude upper-bound {mu} outside [{MU_MIN}, 1]"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return arg("sigma must be positive");
        }
        Ok(Self {
            num_slots,
            transforms,
            logits,
            mag_upper,
            sigma,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return arg("sigma must be positive");
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_transforms(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[TransformId] {
        &self.transforms
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn slot_logits(&self, k: usize) -> &[f64] {
        let n = self.num_transforms();
        &self.logits[k * n..(k + 1) * n]
    }

    /// Mutable logits, for tests and hand-built policies.
    pub fn slot_logits_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.num_transforms();
        &mut self.logits[k * n..(k + 1) * n]
    }

    pub fn mag_upper(&self) -> &[f64] {
        &self.mag_upper
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn slot_probs(&self, k: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.num_transforms()];
        softmax_into(self.slot_logits(k), &mut p);
        p
    }

    /// Row-major `K x N` probabilities.
    pub fn probs(&self) -> Vec<f64> {
        (0..self.num_slots)
            .flat_map(|k| self.slot_probs(k))
            .collect()
    }

    /// Per-transform probability averaged over slots.
    pub fn mean_probs(&self) -> Vec<f64> {
        let n = self.num_transforms();
        let mut avg = vec![0.0; n];
        for k in 0..self.num_slots {
            for (a, p) in avg.iter_mut().zip(self.slot_probs(k)) {
                *a += p / self.num_slots as f64;
            }
        }
        avg
    }

    /// Entropy (nats) of each slot's categorical distribution.
    pub fn slot_entropies(&self) -> Vec<f64> {
        (0..self.num_slots)
            .map(|k| {
                -self
                    .slot_probs(k)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn index_of(&self, id: TransformId) -> Option<usize> {
        self.transforms.iter().position(|&t| t == id)
    }

    fn check_shape(&self, other_slots: usize, other_n: usize) -> Result<()> {
        if other_slots != self.num_slots || other_n != self.num_transforms() {
            return arg(format!(
                "shape mismatch: policy is {}x{}, got {}x{}",
                self.num_slots,
                self.num_transforms(),
                other_slots,
                other_n
            ));
        }
        Ok(())
    }

    fn check_tau(&self, tau: &CompositeAugmentation) -> Result<()> {
        if tau.slots.len() != self.num_slots {
            return arg(format!(
                "augmentation has {} slots, policy has {}",
                tau.slots.len(),
                self.num_slots
            ));
        }
        if let Some(s) = tau
            .slots
            .iter()
            .find(|s| s.transform >= self.num_transforms())
        {
            return arg(format!("transform index {} out of range", s.transform));
        }
        Ok(())
    }

    /// Draws one composite augmentation.
    ///
    /// Every slot consumes the same number of random draws whatever
    /// transform it picks, so streams stay aligned across policies.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CompositeAugmentation {
        let n = self.num_transforms();
        let mut probs = vec![0.0; n];
        let slots = (0..self.num_slots)
            .map(|k| {
                softmax_into(self.slot_logits(k), &mut probs);
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut transform = n - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        transform = i;
                        break;
                    }
                }
                let u = rng.random::<f64>() * self.mag_upper[transform];
                let e: f64 = StandardNormal.sample(rng);
                let coin: bool = rng.random();
                let direction = if self.transforms[transform].is_directional() && coin {
                    -1
                } else {
                    1
                };
                Slot {
                    transform,
                    magnitude: u + self.sigma * e,
                    direction,
                }
            })
            .collect();
        CompositeAugmentation { slots }
    }

    /// Exact log-density of `tau`, excluding the constant direction term.
    pub fn log_prob(&self, tau: &CompositeAugmentation) -> Result<f64> {
        self.check_tau(tau)?;
        let mut lp = 0.0;
        for (k, s) in tau.slots.iter().enumerate() {
            lp += log_softmax(self.slot_logits(k), s.transform);
            if !self.transforms[s.transform].is_parameter_free() {
                lp += magnitude_density(self.mag_upper[s.transform], self.sigma, s.magnitude).ln();
            }
        }
        Ok(lp)
    }

    /// Score `grad log p(tau)` in `(logits, mag_upper)`.
    pub fn score(&self, tau: &CompositeAugmentation) -> Result<PolicyGradient> {
        self.check_tau(tau)?;
        let n = self.num_transforms();
        let mut g = PolicyGradient::zeros_like(self);
        let mut probs = vec![0.0; n];
        for (k, s) in tau.slots.iter().enumerate() {
            softmax_into(self.slot_logits(k), &mut probs);
            let row = &mut g.d_logits[k * n..(k + 1) * n];
            for (d, p) in row.iter_mut().zip(&probs) {
                *d -= p;
            }
            row[s.transform] += 1.0;
            if !self.transforms[s.transform].is_parameter_free() {
                g.d_mag[s.transform] +=
                    magnitude_score(self.mag_upper[s.transform], self.sigma, s.magnitude);
            }
        }
        Ok(g)
    }

    /// `KL(p_pi || p_anchor_pi)` summed over slots, with its exact gradient in
    /// the logits. Magnitudes are not anchored.
    pub fn kl_to_anchor(&self, anchor: &Policy) -> Result<(f64, PolicyGradient)> {
        self.check_shape(anchor.num_slots, anchor.num_transforms())?;
        let n = self.num_transforms();
        let mut g = PolicyGradient::zeros_like(self);
        let mut total = 0.0;
        let mut q = vec![0.0; n];
        let mut qa = vec![0.0; n];
        for k in 0..self.num_slots {
            softmax_into(self.slot_logits(k), &mut q);
            softmax_into(anchor.slot_logits(k), &mut qa);
            let log_ratio: Vec<f64> = (0..n)
                .map(|i| {
                    log_softmax(self.slot_logits(k), i) - log_softmax(anchor.slot_logits(k), i)
                })
                .collect();
            let kl: f64 = q.iter().zip(&log_ratio).map(|(p, r)| p * r).sum();
            total += kl;
            for i in 0..n {
                g.d_logits[k * n + i] = q[i] * (log_ratio[i] - kl);
            }
        }
        Ok((total, g))
    }

    /// Projected gradient step on the policy:
    ///
    /// `logits -= alpha * (G + lambda * grad KL)`,
    /// `mu -= (alpha / mu_lr_divisor) * G_mu`, then `mu` is projected onto
    /// `[MU_MIN, 1]`. Magnitude bounds of parameter-free transforms are
    /// never touched.
    pub fn outer_update(
        &self,
        grad: &PolicyGradient,
        anchor: &Policy,
        step: &OuterStep,
    ) -> Result<Policy> {
        self.check_shape(grad.num_slots, grad.d_mag.len())?;
        if !grad.is_finite() {
            return Err(Error::Numerical("non-finite policy gradient".into()));
        }
        if !(step.alpha >= 0.0 && step.lambda >= 0.0 && step.mu_lr_divisor > 0.0) {
            return arg("outer step needs alpha >= 0, lambda >= 0, mu divisor > 0");
        }
        let mut next = self.clone();
        let kl_grad = if step.lambda > 0.0 {
            Some(self.kl_to_anchor(anchor)?.1)
        } else {
            None
        };
        for (i, l) in next.logits.iter_mut().enumerate() {
            let mut d = grad.d_logits[i];
            if let Some(kg) = &kl_grad {
                d += step.lambda * kg.d_logits[i];
            }
            *l -= step.alpha * d;
        }
        let mu_lr = step.alpha / step.mu_lr_divisor;
        for (i, mu) in next.mag_upper.iter_mut().enumerate() {
            if self.transforms[i].is_parameter_free() {
                continue;
            }
            *mu = (*mu - mu_lr * grad.d_mag[i]).clamp(MU_MIN, 1.0);
        }
        if !next.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("policy logits diverged".into()));
        }
        Ok(next)
    }

    pub fn to_json(&self) -> PolicyJson {
        let n = self.num_transforms();
        PolicyJson {
            k: self.num_slots,
            n,
            logits: self.logits.chunks(n).map(<[f64]>::to_vec).collect(),
            mag_upper: self.mag_upper.clone(),
            sigma: self.sigma,
            transform_ids: self
                .transforms
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
        }
    }

    pub fn from_json(doc: &PolicyJson) -> Result<Self> {
        if doc.logits.len() != doc.k || doc.transform_ids.len() != doc.n {
            return Err(Error::Validation("policy document shape mismatch".into()));
        }
        if doc.logits.iter().any(|r| r.len() != doc.n) {
            return Err(Error::Validation("policy logit row length mismatch".into()));
        }
        let transforms = doc
            .transform_ids
            .iter()
            .map(|s| {
                TransformId::from_name(s)
                    .ok_or_else(|| Error::Validation(format!("unknown transform {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Policy::from_parts(
            doc.k,
            transforms,
            doc.logits.concat(),
            doc.mag_upper.clone(),
            doc.sigma,
        )
        .map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

/// The first `n` transforms of the default registry, uniformly weighted.
pub fn uniform_policy(num_slots: usize, n: usize, mu_init: f64) -> Result<Policy> {
    if n > TransformId::ALL.len() {
        return arg(format!(
            "registry has only {} transforms",
            TransformId::ALL.len()
        ));
    }
    Policy::uniform(
        num_slots,
        &TransformId::ALL[..n.min(TransformId::ALL.len())],
        mu_init,
    )
}

/// Step sizes of one outer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterStep {
    pub alpha: f64,
    pub lambda: f64,
    pub mu_lr_divisor: f64,
}

/// On-disk policy document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyJson {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub logits: Vec<Vec<f64>>,
    pub mag_upper: Vec<f64>,
    pub sigma: f64,
    pub transform_ids: Vec<String>,
}

impl CompositeAugmentation {
    /// Applies the slots in order to `image`, clamping each magnitude.
    pub fn apply<R: Rng + ?Sized>(&self, policy: &Policy, image: &Image, rng: &mut R) -> Image {
        let mut out = image.clone();
        for s in &self.slots {
            let spec = policy.transforms[s.transform].spec();
            out = apply_transform(&spec, s.magnitude.clamp(0.0, 1.0), s.direction, &out, rng);
        }
        out
    }
}
