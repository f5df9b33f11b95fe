#![allow(dead_code)]

use augsearch::data::{generate_synthetic, Splits, SyntheticKind};
use augsearch::policy::{CompositeAugmentation, Policy, PolicyGradient, Slot};
use augsearch::raster::{Image, TransformId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random images of mixed size and channel count. Every fifth image is
/// posterized to a few gray levels so histogram transforms see ties.
pub fn corpus(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let side = rng.random_range(3..=12);
            let (w, h) = if i % 2 == 0 {
                (side, side)
            } else {
                (side, rng.random_range(3..=12))
            };
            let channels = if i % 3 == 0 { 3 } else { 1 };
            let pixels = (0..w * h * channels)
                .map(|_| {
                    let v: f64 = rng.random();
                    if i % 5 == 0 {
                        (v * 4.0).floor() / 3.0
                    } else {
                        v
                    }
                })
                .collect();
            Image::new(w, h, channels, pixels).unwrap()
        })
        .collect()
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.len(), b.len());
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// The rotation-invariant task with a half/half train/val split.
pub fn rotation_splits(n: usize, seed: u64) -> Splits {
    let data = generate_synthetic(SyntheticKind::RotationInvariant, n, 16, seed).unwrap();
    let test = generate_synthetic(SyntheticKind::RotationInvariant, 1000, 16, seed + 1000).unwrap();
    Splits::new(&data, test, 0.5, seed).unwrap()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `(1/mu) * integral_0^mu N(m - u; 0, sigma^2) du` by quadrature.
pub fn density_by_quadrature(mu: f64, sigma: f64, m: f64) -> f64 {
    simpson(|u| std_normal_pdf((m - u) / sigma) / sigma, 0.0, mu, 4000) / mu
}

/// Closed-form CDF of `U[0, mu] + N(0, sigma^2)`, from
/// `integral Phi = t Phi(t) + phi(t)`.
pub fn magnitude_cdf(mu: f64, sigma: f64, m: f64) -> f64 {
    let g = |t: f64| t * std_normal_cdf(t) + std_normal_pdf(t);
    sigma / mu * (g(m / sigma) - g((m - mu) / sigma))
}

pub fn random_policy(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Policy {
    let mut ids = TransformId::ALL.to_vec();
    ids.shuffle(rng);
    ids.truncate(n);
    let logits = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mu = (0..n).map(|_| rng.random_range(0.1..0.95)).collect();
    Policy::from_parts(k, ids, logits, mu, 0.1).unwrap()
}

pub fn with_logit(p: &Policy, i: usize, delta: f64) -> Policy {
    let mut logits = p.logits().to_vec();
    logits[i] += delta;
    Policy::from_parts(
        p.num_slots(),
        p.transforms().to_vec(),
        logits,
        p.mag_upper().to_vec(),
        p.sigma(),
    )
    .unwrap()
}

pub fn with_mu(p: &Policy, i: usize, delta: f64) -> Policy {
    let mut mu = p.mag_upper().to_vec();
    mu[i] += delta;
    Policy::from_parts(
        p.num_slots(),
        p.transforms().to_vec(),
        p.logits().to_vec(),
        mu,
        p.sigma(),
    )
    .unwrap()
}

pub fn close_rel(fd: f64, exact: f64, tol: f64) -> bool {
    (fd - exact).abs() <= tol * (1.0 + exact.abs())
}

/// Kolmogorov statistic of `n` sampled magnitudes against the closed-form
/// CDF, with the asymptotic critical value at level 0.01.
pub fn ks_magnitudes(mu: f64, n: usize, seed: u64) -> (f64, f64) {
    let p = Policy::from_parts(
        1,
        vec![TransformId::Identity, TransformId::Rotate],
        vec![0.0, 50.0],
        vec![0.5, mu],
        0.1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..n)
        .map(|_| p.sample(&mut rng).slots[0].magnitude)
        .collect();
    m.sort_by(f64::total_cmp);
    let d = m
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = magnitude_cdf(mu, 0.1, x);
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    (d, 1.6276 / (n as f64).sqrt())
}

pub fn single(transform: usize, magnitude: f64) -> CompositeAugmentation {
    CompositeAugmentation {
        slots: vec![Slot {
            transform,
            magnitude,
            direction: 1,
        }],
    }
}

/// `E[score]` for a one-slot policy: exact sum over transforms, Simpson
/// quadrature over magnitudes on `[-1, 2]`.
pub fn enumerated_score_mean(p: &Policy) -> PolicyGradient {
    assert_eq!(p.num_slots(), 1);
    let n = p.num_transforms();
    let probs = p.slot_probs(0);
    let mut mean = PolicyGradient::zeros_like(p);
    for i in 0..n {
        if p.transforms()[i].is_parameter_free() {
            mean.add_scaled(&p.score(&single(i, 0.0)).unwrap(), probs[i]);
            continue;
        }
        let mu = p.mag_upper()[i];
        let weight = |m: f64| probs[i] * density_by_quadrature(mu, p.sigma(), m);
        for j in 0..n {
            mean.d_logits[j] += simpson(
                |m| weight(m) * p.score(&single(i, m)).unwrap().d_logits[j],
                -1.0,
                2.0,
                6000,
            );
        }
        mean.d_mag[i] += simpson(
            |m| weight(m) * p.score(&single(i, m)).unwrap().d_mag[i],
            -1.0,
            2.0,
            6000,
        );
    }
    mean
}

pub mod tiny {
    //! A K=1, N=2 problem small enough to enumerate: Identity vs Invert on
    //! a 2x2 linear classifier (10 parameters).

    use augsearch::data::Example;
    use augsearch::hypergrad::{inner_grad, outer_grad};
    use augsearch::par::Execution;
    use augsearch::policy::Policy;
    use augsearch::predictor::{loss_and_grad, Architecture, PredictorParams};
    use augsearch::raster::{Image, TransformId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Problem {
        pub arch: Architecture,
        pub theta: Vec<f64>,
        pub train: Vec<Example>,
        pub val: Vec<Example>,
        pub policy: Policy,
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Example> {
        (0..n)
            .map(|_| Example {
                image: Image::new(2, 2, 1, (0..4).map(|_| rng.random()).collect()).unwrap(),
                label: rng.random_range(0..2),
            })
            .collect()
    }

    pub fn problem(seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::linear(2, 2, 1, 2);
        let theta = PredictorParams::init(arch, &mut rng).unwrap().theta;
        let train = batch(&mut rng, 4);
        let val = batch(&mut rng, 4);
        let policy = Policy::from_parts(
            1,
            vec![TransformId::Identity, TransformId::Invert],
            vec![0.4, -0.2],
            vec![0.75, 0.75],
            0.1,
        )
        .unwrap();
        Problem {
            arch,
            theta,
            train,
            val,
            policy,
        }
    }

    fn softmax(l: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = l.iter().map(|v| v.exp()).collect();
        let s: f64 = z.iter().sum();
        z.iter().map(|v| v / s).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    impl Problem {
        pub fn probs(&self) -> Vec<f64> {
            softmax(self.policy.logits())
        }

        /// Train gradient under transform `i`, built by hand.
        pub fn train_grad(&self, i: usize) -> Vec<f64> {
            let batch: Vec<Example> = self
                .train
                .iter()
                .map(|ex| Example {
                    image: if i == 0 {
                        ex.image.clone()
                    } else {
                        let px = ex.image.pixels().iter().map(|v| 1.0 - v).collect();
                        Image::new(2, 2, 1, px).unwrap()
                    },
                    label: ex.label,
                })
                .collect();
            loss_and_grad(&self.arch, &self.theta, &batch).unwrap().1
        }

        fn val_grad_at(&self, theta: &[f64]) -> Vec<f64> {
            loss_and_grad(&self.arch, theta, &self.val).unwrap().1
        }

        /// Gradient in the logits of
        /// `F(pi) = L_val(theta - eta * sum_i p_i(pi) g_i)`.
        pub fn exact_surrogate_grad(&self, eta: f64) -> Vec<f64> {
            let p = self.probs();
            let g = [self.train_grad(0), self.train_grad(1)];
            let mean: Vec<f64> = (0..self.theta.len())
                .map(|d| p[0] * g[0][d] + p[1] * g[1][d])
                .collect();
            let theta_hat: Vec<f64> = self
                .theta
                .iter()
                .zip(&mean)
                .map(|(t, m)| t - eta * m)
                .collect();
            let gv = self.val_grad_at(&theta_hat);
            (0..2)
                .map(|j| {
                    // d p_i / d pi_j = p_i (delta_ij - p_j)
                    let s: f64 = (0..2)
                        .map(|i| p[i] * (f64::from(u8::from(i == j)) - p[j]) * dot(&gv, &g[i]))
                        .sum();
                    -eta * s
                })
                .collect()
        }

        /// Exact expectation of the `n_aug`-sample estimator, enumerating
        /// all `2^n_aug` index tuples.
        pub fn enumerated_estimator_mean(&self, eta: f64, n_aug: usize) -> Vec<f64> {
            let p = self.probs();
            let g = [self.train_grad(0), self.train_grad(1)];
            let mut out = vec![0.0; 2];
            for mask in 0u32..(1 << n_aug) {
                let idx: Vec<usize> = (0..n_aug).map(|j| ((mask >> j) & 1) as usize).collect();
                let prob: f64 = idx.iter().map(|&i| p[i]).product();
                let theta_hat: Vec<f64> = (0..self.theta.len())
                    .map(|d| {
                        let m = idx.iter().map(|&i| g[i][d]).sum::<f64>() / n_aug as f64;
                        self.theta[d] - eta * m
                    })
                    .collect();
                let gv = self.val_grad_at(&theta_hat);
                for &i in &idx {
                    let w = dot(&gv, &g[i]);
                    for (j, o) in out.iter_mut().enumerate() {
                        let score = f64::from(u8::from(i == j)) - p[j];
                        *o += prob * (-eta / n_aug as f64) * w * score;
                    }
                }
            }
            out
        }

        /// Mean and standard error of the library estimator over `draws`.
        pub fn monte_carlo(
            &self,
            eta: f64,
            n_aug: usize,
            draws: usize,
            seed: u64,
        ) -> (Vec<f64>, Vec<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..draws {
                let (_, hb) = inner_grad(
                    &self.arch,
                    &self.theta,
                    &self.policy,
                    self.train.clone(),
                    &mut rng,
                    n_aug,
                    Execution::Sequential,
                )
                .unwrap();
                let est =
                    outer_grad(&self.arch, &self.theta, &hb, &self.val, eta, &self.policy).unwrap();
                for j in 0..2 {
                    sum[j] += est.grad.d_logits[j];
                    sq[j] += est.grad.d_logits[j].powi(2);
                }
            }
            let n = draws as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let se = (0..2)
                .map(|j| ((sq[j] / n - mean[j].powi(2)) * n / (n - 1.0)).sqrt() / n.sqrt())
                .collect();
            (mean, se)
        }
    }
}
