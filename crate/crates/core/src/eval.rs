//! Final evaluation: train a fresh model on train + val under a fixed policy
//! and report clean test accuracy across seeds.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_hflip, Dataset, Example, Splits};
use crate::error::{arg, Error, Result};
use crate::par::{self, Execution};
use crate::policy::Policy;
use crate::predictor::{
    accuracy, add_weight_decay, loss_and_grad, sgd_step, Architecture, OptimState, PredictorParams,
};
use crate::search::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Sample one augmentation per image instead of one per mini-batch.
    pub per_image: bool,
    /// Random left-right flips before the policy, off by default.
    pub hflip: bool,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            per_image: false,
            hflip: false,
            execution: Execution::Parallel,
        }
    }
}

impl EvalConfig {
    /// CIFAR-scale training: 200 epochs, batch 128, lr 0.1, weight decay 5e-4.
    pub fn cifar_reference() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return arg("epochs and batch_size must be positive");
        }
        OptimState::new(1, self.lr, self.momentum, self.weight_decay, 1).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% normal interval, `1.96 * s / sqrt(n)`.
    pub ci_half_width: f64,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Appends `label,n,mean,ci,accuracies...` to a CSV ledger, writing a
    /// header first when the file is new.
    pub fn append_to_ledger(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "label,seeds,mean,ci_half_width,accuracies")?;
        }
        let accs: Vec<String> = self.accuracies.iter().map(|a| a.to_string()).collect();
        writeln!(
            f,
            "{},{},{},{},{}",
            self.label.replace(',', ";"),
            self.seeds.len(),
            self.mean,
            self.ci_half_width,
            accs.join(";")
        )?;
        Ok(())
    }
}

/// Sample mean and the 95% half-width `1.96 * s / sqrt(n)` with the
/// `n - 1` standard deviation. Needs at least two values.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return arg("a confidence interval needs at least two values");
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

const STREAM_EVAL_INIT: u64 = 11;
const STREAM_EVAL_BATCH: u64 = 12;
const STREAM_EVAL_AUG: u64 = 13;

/// Trains one model on `train` for `cfg.epochs` and returns its parameters.
/// With `policy = None` no augmentation is applied; augmentation randomness
/// has its own stream so the batch order does not depend on the policy.
pub fn train_model(
    arch: Architecture,
    policy: Option<&Policy>,
    train: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PredictorParams> {
    cfg.validate()?;
    if train.is_empty() {
        return arg("empty training set");
    }
    let mut params = PredictorParams::init(arch, &mut stream(seed, STREAM_EVAL_INIT, 0))?;
    let mut batch_rng = stream(seed, STREAM_EVAL_BATCH, 0);
    let mut aug_rng = stream(seed, STREAM_EVAL_AUG, 0);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = OptimState::new(
        params.theta.len(),
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.epochs * per_epoch,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<Example> = chunk.iter().map(|&i| train.example(i)).collect();
            if cfg.hflip {
                random_hflip(&mut batch, &mut batch_rng);
            }
            if let Some(p) = policy {
                augment_batch(p, &mut batch, cfg.per_image, &mut aug_rng);
            }
            let (_, mut g) = loss_and_grad(&arch, &params.theta, &batch)?;
            add_weight_decay(&mut g, &params.theta, cfg.weight_decay);
            sgd_step(&mut params.theta, &g, &mut opt)?;
        }
        if !params.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("evaluation training diverged".into()));
        }
    }
    Ok(params)
}

fn augment_batch<R: Rng + ?Sized>(
    policy: &Policy,
    batch: &mut [Example],
    per_image: bool,
    rng: &mut R,
) {
    let mut shared = None;
    for ex in batch {
        let tau = if per_image {
            policy.sample(rng)
        } else {
            shared.get_or_insert_with(|| policy.sample(rng)).clone()
        };
        ex.image = tau.apply(policy, &ex.image, rng);
    }
}

/// Evaluates `policy` (or no augmentation) once per seed on the clean test
/// split after training on train + val.
pub fn evaluate_policy(
    arch: Architecture,
    policy: Option<&Policy>,
    splits: &Splits,
    cfg: &EvalConfig,
    seeds: &[u64],
    label: &str,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return arg("need at least one seed");
    }
    if splits.test.is_empty() {
        return arg("empty test split");
    }
    let full = splits.full_train()?;
    let test = splits.test.examples();
    let accuracies = par::map(cfg.execution, seeds, |&s| {
        let params = train_model(arch, policy, &full, cfg, s)?;
        Ok(accuracy(&arch, &params.theta, &test))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    // a single seed has no spread estimate; report a zero-width interval
    let (mean, ci_half_width) = if accuracies.len() == 1 {
        (accuracies[0], 0.0)
    } else {
        confidence_interval(&accuracies)?
    };
    Ok(EvalReport {
        label: label.to_string(),
        seeds: seeds.to_vec(),
        accuracies,
        mean,
        ci_half_width,
        config: cfg.clone(),
    })
}
