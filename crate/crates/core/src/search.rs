//! The multi-stage policy search.
//!
//! ```text
//! phi <- uniform;  theta0 <- pretrain(uniform)
//! for each round:
//!     theta <- theta0                       (cold start)
//!     anchor <- phi
//!     for j in 1..=n_total:
//!         theta step on the augmented training loss
//!         if j > n_retrain:
//!             phi <- phi - alpha (G + lambda grad KL(phi || anchor))
//! ```
//!
//! Ablations: warm start (theta carried across rounds), no KL, a single long
//! stage anchored at the uniform policy, and an ensemble of independently
//! pretrained replicas whose outer estimates are averaged every step.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_hflip, Dataset};
use crate::error::{arg, Error, Result};
use crate::hypergrad::{average_gradients, inner_grad, outer_grad, OuterEstimate};
use crate::par::{self, Execution};
use crate::policy::{OuterStep, Policy, PolicyGradient, DEFAULT_MU_INIT, DEFAULT_SIGMA};
use crate::predictor::{
    add_weight_decay, loss, sgd_step, Architecture, OptimState, Predictor, PredictorParams,
    DEFAULT_HIDDEN,
};
use crate::raster::TransformId;

/// Search mode switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchMode {
    pub kl_on: bool,
    pub cold_start: bool,
    pub single_stage: bool,
    pub ensemble_size: usize,
}

impl Default for SearchMode {
    fn default() -> Self {
        Self {
            kl_on: true,
            cold_start: true,
            single_stage: false,
            ensemble_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_rounds: usize,
    pub n_retrain: usize,
    pub n_total: usize,
    /// Augmentations per step.
    pub n_aug: usize,
    pub train_batch_size: usize,
    pub val_batch_size: usize,
    /// Initial lower-level learning rate; also the virtual step size.
    pub inner_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Upper-level learning rate for the logits.
    pub alpha: f64,
    /// KL anchoring weight.
    pub lambda: f64,
    /// The magnitude bounds use `alpha / mu_lr_divisor`.
    pub mu_lr_divisor: f64,
    /// Heavy-ball coefficient for the outer gradient (0 disables it).
    pub policy_momentum: f64,
    pub num_slots: usize,
    pub mu_init: f64,
    pub sigma: f64,
    pub transforms: Vec<TransformId>,
    pub hidden: usize,
    /// Defaults to `2 * n_total`.
    pub pretrain_steps: Option<usize>,
    /// Random left-right flips of training batches, outside the policy.
    pub hflip: bool,
    pub mode: SearchMode,
    pub seed: u64,
    pub execution: Execution,
}

/// Desk-scale upper-level learning rate; `lambda` follows from
/// `alpha * lambda = 0.02`.
pub const DESK_ALPHA: f64 = 4.0;
pub const KL_LR_PRODUCT: f64 = 0.02;

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_rounds: 10,
            n_retrain: 100,
            n_total: 140,
            n_aug: 8,
            train_batch_size: 16,
            val_batch_size: 128,
            inner_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: DESK_ALPHA,
            lambda: KL_LR_PRODUCT / DESK_ALPHA,
            mu_lr_divisor: 40.0,
            policy_momentum: 0.0,
            num_slots: 3,
            mu_init: DEFAULT_MU_INIT,
            sigma: DEFAULT_SIGMA,
            transforms: TransformId::ALL.to_vec(),
            hidden: DEFAULT_HIDDEN,
            pretrain_steps: None,
            hflip: false,
            mode: SearchMode::default(),
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl SearchConfig {
    /// The CIFAR-scale schedule: 1000 re-train steps and 400 joint steps per
    /// round, batches of 8 x 128, upper lr 1 and KL weight 0.02.
    pub fn cifar_reference() -> Self {
        Self {
            n_rounds: 10,
            n_retrain: 1000,
            n_total: 1400,
            n_aug: 8,
            train_batch_size: 128,
            val_batch_size: 128,
            inner_lr: 0.1,
            alpha: 1.0,
            lambda: 0.02,
            ..Self::default()
        }
    }

    /// Multi-stage search without KL anchoring: lambda = 0, the magnitude
    /// divisor drops to 10 and the upper lr is a quarter of the default.
    pub fn no_kl(mut self) -> Self {
        self.mode.kl_on = false;
        self.lambda = 0.0;
        self.mu_lr_divisor = 10.0;
        self.alpha *= 0.25;
        self
    }

    /// Model parameters carried from round to round.
    pub fn warm_start(mut self) -> Self {
        self.mode.cold_start = false;
        self
    }

    /// One long stage anchored at the uniform policy (entropy
    /// regularization) with the same number of policy updates; upper lr and
    /// KL weight are both quartered.
    pub fn single_stage(mut self) -> Self {
        self.mode.single_stage = true;
        self.alpha *= 0.25;
        self.lambda *= 0.25;
        self
    }

    pub fn ensemble(mut self, size: usize) -> Self {
        self.mode.ensemble_size = size;
        self
    }

    pub fn pretrain_horizon(&self) -> usize {
        self.pretrain_steps.unwrap_or(2 * self.n_total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_retrain > self.n_total {
            return arg("n_retrain must not exceed n_total");
        }
        if self.mode.ensemble_size == 0 {
            return arg("ensemble_size must be >= 1");
        }
        if self.n_aug == 0 || self.train_batch_size == 0 || self.val_batch_size == 0 {
            return arg("augmentation and batch sizes must be positive");
        }
        if !(self.inner_lr > 0.0) {
            return arg("inner_lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return arg("alpha and lambda must be nonnegative");
        }
        if self.mode.kl_on && !(self.alpha * self.lambda > 0.0) {
            return arg("alpha * lambda must be positive when KL anchoring is on");
        }
        if !(self.mu_lr_divisor > 0.0) {
            return arg("mu_lr_divisor must be positive");
        }
        if !(0.0..1.0).contains(&self.policy_momentum) {
            return arg("policy_momentum must lie in [0, 1)");
        }
        if self.transforms.len() < 2 {
            return arg("need at least two transforms");
        }
        if self.hidden == 0 {
            return arg("hidden width must be positive");
        }
        Policy::uniform(self.num_slots, &self.transforms, self.mu_init)?.with_sigma(self.sigma)?;
        OptimState::new(1, self.inner_lr, self.momentum, self.weight_decay, 1)?;
        Ok(())
    }

    pub fn initial_policy(&self) -> Result<Policy> {
        Policy::uniform(self.num_slots, &self.transforms, self.mu_init)?.with_sigma(self.sigma)
    }

    /// MLP sized for `data`.
    pub fn architecture(&self, data: &Dataset) -> Result<Architecture> {
        let (w, h, c) = data
            .dims()
            .ok_or_else(|| Error::Argument("empty dataset".into()))?;
        let arch = Architecture::mlp(w, h, c, self.hidden, data.num_classes());
        arch.validate()?;
        Ok(arch)
    }

    fn outer_step(&self) -> OuterStep {
        OuterStep {
            alpha: self.alpha,
            lambda: if self.mode.kl_on { self.lambda } else { 0.0 },
            mu_lr_divisor: self.mu_lr_divisor,
        }
    }
}

/// Independent random stream for `(seed, purpose, replica)`.
pub fn stream(seed: u64, purpose: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 16 | replica);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN_DATA: u64 = 2;
const STREAM_PRETRAIN_AUG: u64 = 3;
const STREAM_SEARCH_DATA: u64 = 4;
const STREAM_SEARCH_AUG: u64 = 5;

/// Output of [`pretrain`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Parameters rounded to checkpoint precision.
    pub params: PredictorParams,
    /// Mean augmented training loss at each step.
    pub losses: Vec<f64>,
    /// How often each transform index was sampled.
    pub transform_counts: Vec<u64>,
}

/// Seeded initialization of a replica, rounded to checkpoint precision.
pub fn initial_params(
    arch: Architecture,
    config: &SearchConfig,
    replica: u64,
) -> Result<PredictorParams> {
    let mut params = PredictorParams::init(arch, &mut stream(config.seed, STREAM_INIT, replica))?;
    params.round_to_f32();
    Ok(params)
}

/// Trains a fresh model on `train` under the uniform policy with momentum
/// SGD and a cosine schedule over `steps`.
pub fn pretrain(
    arch: Architecture,
    config: &SearchConfig,
    train: &Dataset,
    replica: u64,
    steps: usize,
) -> Result<Pretrained> {
    if train.len() < config.train_batch_size {
        return arg(format!(
            "train split has {} examples, fewer than one batch of {}",
            train.len(),
            config.train_batch_size
        ));
    }
    let policy = config.initial_policy()?;
    let mut params = initial_params(arch, config, replica)?;
    let mut data_rng = stream(config.seed, STREAM_PRETRAIN_DATA, replica);
    let mut aug_rng = stream(config.seed, STREAM_PRETRAIN_AUG, replica);
    let mut opt = OptimState::new(
        arch.num_params(),
        config.inner_lr,
        config.momentum,
        config.weight_decay,
        steps,
    )?;
    let mut losses = Vec::with_capacity(steps);
    let mut transform_counts = vec![0u64; policy.num_transforms()];
    for _ in 0..steps {
        let mut batch = train.sample_batch(config.train_batch_size, &mut data_rng);
        if config.hflip {
            random_hflip(&mut batch, &mut data_rng);
        }
        let (mut g, hb) = inner_grad(
            &arch,
            &params.theta,
            &policy,
            batch,
            &mut aug_rng,
            config.n_aug,
            config.execution,
        )?;
        for tau in &hb.augmentations {
            for s in &tau.slots {
                transform_counts[s.transform] += 1;
            }
        }
        losses.push(hb.mean_train_loss());
        add_weight_decay(&mut g, &params.theta, config.weight_decay);
        sgd_step(&mut params.theta, &g, &mut opt)?;
    }
    if !params.theta.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("pretraining diverged".into()));
    }
    params.round_to_f32();
    Ok(Pretrained {
        params,
        losses,
        transform_counts,
    })
}

/// One row of the trace, recorded after every outer update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub round: usize,
    /// Row-major `K x N` slot probabilities.
    pub probs: Vec<f64>,
    pub mag_upper: Vec<f64>,
    pub kl_to_anchor: f64,
    pub entropies: Vec<f64>,
    /// Mean augmented training loss of the inner step.
    pub inner_loss: f64,
    /// Validation-batch loss at the virtual parameters.
    pub outer_loss: f64,
}

/// End-of-round diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    /// Loss on the whole validation split, averaged over replicas.
    pub val_loss: f64,
    pub kl_to_anchor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTrace {
    pub transforms: Vec<TransformId>,
    pub num_slots: usize,
    pub records: Vec<TraceRecord>,
    pub rounds: Vec<RoundSummary>,
}

impl PolicyTrace {
    pub fn new(num_slots: usize, transforms: Vec<TransformId>) -> Self {
        Self {
            transforms,
            num_slots,
            records: Vec::new(),
            rounds: Vec::new(),
        }
    }

    /// Per-transform probability averaged over slots, one row per record.
    pub fn mean_probs(&self) -> Vec<Vec<f64>> {
        let n = self.transforms.len();
        self.records
            .iter()
            .map(|r| {
                (0..n)
                    .map(|i| {
                        (0..self.num_slots).map(|k| r.probs[k * n + i]).sum::<f64>()
                            / self.num_slots as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Smallest slot entropy seen anywhere in the trace.
    pub fn min_entropy(&self) -> Option<f64> {
        self.records
            .iter()
            .flat_map(|r| r.entropies.iter().copied())
            .reduce(f64::min)
    }

    fn header(&self) -> String {
        let mut h = String::from("step,round,kl_to_anchor,inner_loss,outer_loss");
        for k in 0..self.num_slots {
            let _ = write!(h, ",entropy_{k}");
        }
        for k in 0..self.num_slots {
            for t in &self.transforms {
                let _ = write!(h, ",p{k}_{}", t.name());
            }
        }
        for t in &self.transforms {
            let _ = write!(h, ",mu_{}", t.name());
        }
        h
    }

    /// One header line plus one row per outer step.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.step, r.round, r.kl_to_anchor, r.inner_loss, r.outer_loss
            );
            for v in r.entropies.iter().chain(&r.probs).chain(&r.mag_upper) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,val_loss,kl_to_anchor\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{},{}", r.round, r.val_loss, r.kl_to_anchor);
        }
        out
    }

    /// Policy recorded at outer step `step` (the last row when `None`).
    /// Logits are the log-probabilities, which reproduce the recorded
    /// softmax up to rounding.
    pub fn policy_at(&self, step: Option<usize>, sigma: f64) -> Result<Policy> {
        let rec = match step {
            Some(s) => self.records.iter().find(|r| r.step == s),
            None => self.records.last(),
        }
        .ok_or_else(|| Error::Argument("requested trace row not found".into()))?;
        let logits = rec
            .probs
            .iter()
            .map(|p| p.max(f64::MIN_POSITIVE).ln())
            .collect();
        Policy::from_parts(
            self.num_slots,
            self.transforms.clone(),
            logits,
            rec.mag_upper.clone(),
            sigma,
        )
    }

    /// Parses [`PolicyTrace::to_csv`] output. Round summaries are not part
    /// of this file and come back empty.
    pub fn from_csv(text: &str) -> Result<PolicyTrace> {
        let bad = |line: usize, msg: String| Error::Validation(format!("trace line {line}: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 5
            || cols[..5] != ["step", "round", "kl_to_anchor", "inner_loss", "outer_loss"]
        {
            return Err(bad(1, "unexpected header".into()));
        }
        let num_slots = cols.iter().filter(|c| c.starts_with("entropy_")).count();
        let transforms = cols
            .iter()
            .filter_map(|c| c.strip_prefix("mu_"))
            .map(|name| {
                TransformId::from_name(name)
                    .ok_or_else(|| bad(1, format!("unknown transform {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = transforms.len();
        if num_slots == 0 || n < 2 || cols.len() != 5 + num_slots + num_slots * n + n {
            return Err(bad(1, "inconsistent column layout".into()));
        }
        let mut trace = PolicyTrace::new(num_slots, transforms);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(i + 2, e.to_string()))?;
            if vals.len() != cols.len() {
                return Err(bad(i + 2, format!("expected {} fields", cols.len())));
            }
            let e0 = 5;
            let p0 = e0 + num_slots;
            let m0 = p0 + num_slots * n;
            trace.records.push(TraceRecord {
                step: vals[0] as usize,
                round: vals[1] as usize,
                kl_to_anchor: vals[2],
                inner_loss: vals[3],
                outer_loss: vals[4],
                entropies: vals[e0..p0].to_vec(),
                probs: vals[p0..m0].to_vec(),
                mag_upper: vals[m0..].to_vec(),
            });
        }
        Ok(trace)
    }
}

/// One independently trained model.
#[derive(Clone, Debug)]
struct Replica {
    theta0: Vec<f64>,
    theta: Vec<f64>,
    opt: OptimState,
    data_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

/// Mutable search state between rounds.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub config: SearchConfig,
    pub arch: Architecture,
    pub policy: Policy,
    pub anchor: Policy,
    pub trace: PolicyTrace,
    replicas: Vec<Replica>,
    velocity: Option<PolicyGradient>,
    rounds_done: usize,
    outer_steps: usize,
}

/// Search aborted by a numerical or argument error; carries the trace so far.
#[derive(Debug)]
pub struct SearchAbort {
    pub error: Error,
    pub trace: PolicyTrace,
}

impl std::fmt::Display for SearchAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "search aborted after {} outer steps: {}",
            self.trace.records.len(),
            self.error
        )
    }
}

impl std::error::Error for SearchAbort {}

impl SearchState {
    /// Builds the state from pretrained checkpoints, one per replica.
    pub fn new(config: SearchConfig, pretrained: Vec<PredictorParams>) -> Result<Self> {
        config.validate()?;
        if pretrained.len() != config.mode.ensemble_size {
            return arg("need one pretrained checkpoint per replica");
        }
        let arch = pretrained[0].arch;
        if pretrained.iter().any(|p| p.arch != arch) {
            return arg("replicas must share an architecture");
        }
        let policy = config.initial_policy()?;
        let replicas = pretrained
            .into_iter()
            .enumerate()
            .map(|(r, p)| {
                Ok(Replica {
                    opt: OptimState::new(
                        p.theta.len(),
                        config.inner_lr,
                        config.momentum,
                        config.weight_decay,
                        config.n_total,
                    )?,
                    theta: p.theta.clone(),
                    theta0: p.theta,
                    data_rng: stream(config.seed, STREAM_SEARCH_DATA, r as u64),
                    aug_rng: stream(config.seed, STREAM_SEARCH_AUG, r as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trace: PolicyTrace::new(policy.num_slots(), policy.transforms().to_vec()),
            anchor: policy.clone(),
            policy,
            arch,
            config,
            replicas,
            velocity: None,
            rounds_done: 0,
            outer_steps: 0,
        })
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    /// Current model parameters of a replica.
    pub fn theta(&self, replica: usize) -> &[f64] {
        &self.replicas[replica].theta
    }

    pub fn theta0(&self, replica: usize) -> &[f64] {
        &self.replicas[replica].theta0
    }

    /// `(n_retrain, n_total)` of one stage; single-stage mode folds every
    /// round's joint steps into one stage.
    fn stage_lengths(&self) -> (usize, usize) {
        let cfg = &self.config;
        if cfg.mode.single_stage {
            let joint = cfg.n_rounds * (cfg.n_total - cfg.n_retrain);
            (cfg.n_retrain, cfg.n_retrain + joint)
        } else {
            (cfg.n_retrain, cfg.n_total)
        }
    }

    /// Round start: restores `theta0` under cold start, restarts every
    /// optimizer schedule and freezes the anchor.
    pub fn begin_round(&mut self) -> Result<()> {
        let (_, n_total) = self.stage_lengths();
        for rep in &mut self.replicas {
            if self.config.mode.cold_start {
                rep.theta.clone_from(&rep.theta0);
            }
            rep.opt.restart(n_total);
        }
        self.anchor = if self.config.mode.single_stage {
            self.config.initial_policy()?
        } else {
            self.policy.clone()
        };
        Ok(())
    }

    /// Runs one stage of `n_total` inner steps, the last
    /// `n_total - n_retrain` of them each followed by one policy update.
    pub fn run_round(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        if train.len() < self.config.train_batch_size {
            return arg("train split smaller than one batch");
        }
        if val.is_empty() {
            return arg("empty validation split");
        }
        let (n_retrain, n_total) = self.stage_lengths();
        self.begin_round()?;
        let cfg = self.config.clone();
        let round = self.rounds_done;
        for j in 1..=n_total {
            let joint = j > n_retrain;
            let policy = &self.policy;
            let arch = &self.arch;
            let outcomes = par::map_mut(cfg.execution, &mut self.replicas, |rep| {
                replica_step(arch, &cfg, policy, rep, train, val, joint)
            });
            let mut estimates = Vec::with_capacity(outcomes.len());
            let mut inner_losses = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                let (l, est) = o?;
                inner_losses.push(l);
                estimates.extend(est);
            }
            if joint {
                self.outer_update(&estimates, &inner_losses, round)?;
            }
        }
        let val_examples = val.examples();
        let mut val_loss = 0.0;
        for rep in &self.replicas {
            val_loss += loss(&self.arch, &rep.theta, &val_examples)?;
        }
        val_loss /= self.replicas.len() as f64;
        let (kl, _) = self.policy.kl_to_anchor(&self.anchor)?;
        self.trace.rounds.push(RoundSummary {
            round,
            val_loss,
            kl_to_anchor: kl,
        });
        self.rounds_done += 1;
        Ok(())
    }

    fn outer_update(
        &mut self,
        estimates: &[OuterEstimate],
        inner_losses: &[f64],
        round: usize,
    ) -> Result<()> {
        let grads: Vec<PolicyGradient> = estimates.iter().map(|e| e.grad.clone()).collect();
        let mut g = average_gradients(&grads)?;
        if self.config.policy_momentum > 0.0 {
            let v = self
                .velocity
                .get_or_insert_with(|| PolicyGradient::zeros_like(&self.policy));
            v.scale(self.config.policy_momentum);
            v.add_scaled(&g, 1.0);
            g = v.clone();
        }
        self.policy = self
            .policy
            .outer_update(&g, &self.anchor, &self.config.outer_step())?;
        let (kl, _) = self.policy.kl_to_anchor(&self.anchor)?;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let outer_losses: Vec<f64> = estimates.iter().map(|e| e.val_loss).collect();
        self.trace.records.push(TraceRecord {
            step: self.outer_steps,
            round,
            probs: self.policy.probs(),
            mag_upper: self.policy.mag_upper().to_vec(),
            kl_to_anchor: kl,
            entropies: self.policy.slot_entropies(),
            inner_loss: mean(inner_losses),
            outer_loss: mean(&outer_losses),
        });
        self.outer_steps += 1;
        Ok(())
    }
}

fn replica_step(
    arch: &Architecture,
    cfg: &SearchConfig,
    policy: &Policy,
    rep: &mut Replica,
    train: &Dataset,
    val: &Dataset,
    joint: bool,
) -> Result<(f64, Option<OuterEstimate>)> {
    let mut batch = train.sample_batch(cfg.train_batch_size, &mut rep.data_rng);
    if cfg.hflip {
        random_hflip(&mut batch, &mut rep.data_rng);
    }
    let (mut g, hb) = inner_grad(
        arch,
        &rep.theta,
        policy,
        batch,
        &mut rep.aug_rng,
        cfg.n_aug,
        cfg.execution,
    )?;
    let estimate = if joint {
        let val_batch = val.sample_batch(cfg.val_batch_size, &mut rep.data_rng);
        Some(outer_grad(
            arch,
            &rep.theta,
            &hb,
            &val_batch,
            cfg.inner_lr,
            policy,
        )?)
    } else {
        None
    };
    add_weight_decay(&mut g, &rep.theta, cfg.weight_decay);
    sgd_step(&mut rep.theta, &g, &mut rep.opt)?;
    if !rep.theta.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("model parameters diverged".into()));
    }
    Ok((hb.mean_train_loss(), estimate))
}

/// Final policy and the trace that produced it.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub policy: Policy,
    pub trace: PolicyTrace,
    /// Pretrained checkpoint of each replica.
    pub pretrained: Vec<Pretrained>,
}

/// Pretrains every replica on `train`, seeded per replica.
pub fn pretrain_replicas(
    config: &SearchConfig,
    arch: Architecture,
    train: &Dataset,
) -> Result<Vec<Pretrained>> {
    let replicas: Vec<u64> = (0..config.mode.ensemble_size as u64).collect();
    par::map(config.execution, &replicas, |&r| {
        pretrain(arch, config, train, r, config.pretrain_horizon())
    })
    .into_iter()
    .collect()
}

/// Pretraining followed by `n_rounds` rounds (or one long stage).
pub fn run_search(
    config: &SearchConfig,
    train: &Dataset,
    val: &Dataset,
) -> std::result::Result<SearchOutcome, Box<SearchAbort>> {
    let abort = |error: Error, trace: PolicyTrace| Box::new(SearchAbort { error, trace });
    let empty = PolicyTrace::new(config.num_slots, config.transforms.clone());
    config.validate().map_err(|e| abort(e, empty.clone()))?;
    let arch = config
        .architecture(train)
        .map_err(|e| abort(e, empty.clone()))?;
    let pretrained = pretrain_replicas(config, arch, train).map_err(|e| abort(e, empty.clone()))?;
    log::info!(
        "pretrained {} replica(s) for {} steps",
        pretrained.len(),
        config.pretrain_horizon()
    );
    let mut state = SearchState::new(
        config.clone(),
        pretrained.iter().map(|p| p.params.clone()).collect(),
    )
    .map_err(|e| abort(e, empty.clone()))?;
    let stages = if config.mode.single_stage {
        usize::from(config.n_rounds > 0)
    } else {
        config.n_rounds
    };
    for _ in 0..stages {
        if let Err(e) = state.run_round(train, val) {
            return Err(abort(e, state.trace));
        }
        if let Some(r) = state.trace.rounds.last() {
            log::info!(
                "round {}: val loss {:.4}, KL to anchor {:.4}",
                r.round,
                r.val_loss,
                r.kl_to_anchor
            );
        }
    }
    Ok(SearchOutcome {
        policy: state.policy,
        trace: state.trace,
        pretrained,
    })
}
