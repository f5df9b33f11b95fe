//! Score-function hypergradient of the one-step unrolled validation loss.
//!
//! For sampled augmentations `tau_1..tau_Na` applied to one training batch,
//!
//! ```text
//! g_hat     = (1/Na) sum_j grad_theta l_train(theta, tau_j)
//! theta_hat = theta - eta0 * g_hat
//! w_j       = grad_theta l_val(theta_hat) . grad_theta l_train(theta, tau_j)
//! G         = -(eta0/Na) sum_j w_j * grad_phi log p_phi(tau_j)
//! ```
//!
//! `eta0` is the initial lower-level learning rate, not the scheduled one.
//! The same augmentations and training batch feed all four lines; a
//! [`HyperBatch`] carries them from [`inner_grad`] to [`outer_grad`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Example;
use crate::error::{arg, Error, Result};
use crate::par::{self, Execution};
use crate::policy::{CompositeAugmentation, Policy, PolicyGradient};
use crate::predictor::{loss_and_grad, Predictor};

/// Everything the outer estimate needs from the inner step.
#[derive(Clone, Debug)]
pub struct HyperBatch {
    pub augmentations: Vec<CompositeAugmentation>,
    pub train_batch: Vec<Example>,
    /// Data-loss gradient (no weight decay) on the batch under each `tau_j`.
    pub per_aug_train_grads: Vec<Vec<f64>>,
    pub per_aug_train_losses: Vec<f64>,
}

impl HyperBatch {
    pub fn num_augmentations(&self) -> usize {
        self.augmentations.len()
    }

    /// Mean training loss over the augmentations.
    pub fn mean_train_loss(&self) -> f64 {
        self.per_aug_train_losses.iter().sum::<f64>() / self.per_aug_train_losses.len() as f64
    }

    /// `g_hat`: ordered mean of the per-augmentation gradients.
    pub fn mean_grad(&self) -> Vec<f64> {
        mean_of(&self.per_aug_train_grads)
    }
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Applies `tau` to every example of `batch`; `seed` drives random
/// placement (Cutout, RandomCrop).
pub fn augment_batch(
    policy: &Policy,
    tau: &CompositeAugmentation,
    batch: &[Example],
    seed: u64,
) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|ex| Example {
            image: tau.apply(policy, &ex.image, &mut rng),
            label: ex.label,
        })
        .collect()
}

/// Samples `n_aug` augmentations and returns the averaged training gradient
/// together with the batch record for [`outer_grad`].
pub fn inner_grad<P, R>(
    model: &P,
    theta: &[f64],
    policy: &Policy,
    train_batch: Vec<Example>,
    rng: &mut R,
    n_aug: usize,
    exec: Execution,
) -> Result<(Vec<f64>, HyperBatch)>
where
    P: Predictor,
    R: Rng + ?Sized,
{
    if n_aug == 0 {
        return arg("need at least one augmentation per step");
    }
    let augmentations: Vec<CompositeAugmentation> =
        (0..n_aug).map(|_| policy.sample(rng)).collect();
    let jobs: Vec<(usize, u64)> = (0..n_aug).map(|j| (j, rng.random())).collect();
    let results = par::map(exec, &jobs, |&(j, seed)| {
        let augmented = augment_batch(policy, &augmentations[j], &train_batch, seed);
        loss_and_grad(model, theta, &augmented)
    });
    let mut per_aug_train_grads = Vec::with_capacity(n_aug);
    let mut per_aug_train_losses = Vec::with_capacity(n_aug);
    for r in results {
        let (l, g) = r?;
        per_aug_train_losses.push(l);
        per_aug_train_grads.push(g);
    }
    let hb = HyperBatch {
        augmentations,
        train_batch,
        per_aug_train_grads,
        per_aug_train_losses,
    };
    let g_hat = hb.mean_grad();
    if !g_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite training gradient".into()));
    }
    Ok((g_hat, hb))
}

/// Plain gradient step `theta - eta0 * g_hat`.
pub fn virtual_step(theta: &[f64], g_hat: &[f64], eta0: f64) -> Vec<f64> {
    theta.iter().zip(g_hat).map(|(t, g)| t - eta0 * g).collect()
}

/// Result of one outer estimate.
#[derive(Clone, Debug)]
pub struct OuterEstimate {
    pub grad: PolicyGradient,
    /// Validation loss at `theta_hat`.
    pub val_loss: f64,
    /// Alignment weights `w_j`.
    pub weights: Vec<f64>,
}

/// The stochastic upper-level gradient for the augmentations in `hb`.
pub fn outer_grad<P: Predictor>(
    model: &P,
    theta: &[f64],
    hb: &HyperBatch,
    val_batch: &[Example],
    eta0: f64,
    policy: &Policy,
) -> Result<OuterEstimate> {
    if !(eta0 > 0.0) {
        return arg("eta0 must be positive");
    }
    if hb.augmentations.is_empty() || hb.per_aug_train_grads.len() != hb.augmentations.len() {
        return arg("hyper-batch is empty or inconsistent");
    }
    if hb
        .per_aug_train_grads
        .iter()
        .any(|g| g.len() != theta.len())
    {
        return arg("hyper-batch gradients do not match theta");
    }
    let theta_hat = virtual_step(theta, &hb.mean_grad(), eta0);
    let (val_loss, g_val) = loss_and_grad(model, &theta_hat, val_batch)?;
    let weights: Vec<f64> = hb
        .per_aug_train_grads
        .iter()
        .map(|g| g.iter().zip(&g_val).map(|(a, b)| a * b).sum())
        .collect();
    let grad = weighted_score_sum(policy, &hb.augmentations, &weights, eta0)?;
    if !grad.is_finite() || !val_loss.is_finite() {
        return Err(Error::Numerical("non-finite outer gradient".into()));
    }
    Ok(OuterEstimate {
        grad,
        val_loss,
        weights,
    })
}

/// `-(eta0 / Na) * sum_j weights[j] * score(tau_j)` in a fixed order.
pub fn weighted_score_sum(
    policy: &Policy,
    augmentations: &[CompositeAugmentation],
    weights: &[f64],
    eta0: f64,
) -> Result<PolicyGradient> {
    if augmentations.len() != weights.len() || augmentations.is_empty() {
        return arg("one weight per augmentation required");
    }
    let mut g = PolicyGradient::zeros_like(policy);
    for (tau, &w) in augmentations.iter().zip(weights) {
        g.add_scaled(&policy.score(tau)?, w);
    }
    g.scale(-eta0 / augmentations.len() as f64);
    Ok(g)
}

/// Average of several estimates with a fixed reduction order.
pub fn average_gradients(grads: &[PolicyGradient]) -> Result<PolicyGradient> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Argument("nothing to average".into()))?;
    let mut acc = PolicyGradient::zeros(first.num_slots, first.d_mag.len());
    for g in grads {
        acc.add_scaled(g, 1.0);
    }
    acc.scale(1.0 / grads.len() as f64);
    Ok(acc)
}
