mod common;

use augsearch::data::Splits;
use augsearch::par::Execution;
use augsearch::search::{
    initial_params, pretrain, run_search, PolicyTrace, SearchConfig, SearchState,
};
use common::rotation_splits;
use std::sync::OnceLock;

fn splits() -> &'static Splits {
    static S: OnceLock<Splits> = OnceLock::new();
    S.get_or_init(|| rotation_splits(400, 5))
}

fn quick() -> SearchConfig {
    SearchConfig {
        n_rounds: 2,
        n_retrain: 20,
        n_total: 30,
        pretrain_steps: Some(40),
        hidden: 16,
        seed: 9,
        ..SearchConfig::default()
    }
}

fn state(cfg: &SearchConfig) -> SearchState {
    let s = splits();
    let arch = cfg.architecture(&s.train).unwrap();
    let p = pretrain(arch, cfg, &s.train, 0, cfg.pretrain_horizon()).unwrap();
    SearchState::new(cfg.clone(), vec![p.params]).unwrap()
}

#[test]
fn zero_rounds_return_the_uniform_policy() {
    let cfg = SearchConfig {
        n_rounds: 0,
        ..quick()
    };
    let out = run_search(&cfg, &splits().train, &splits().val).unwrap();
    assert_eq!(out.policy, cfg.initial_policy().unwrap());
    assert!(out.trace.records.is_empty());
    assert!(out.trace.rounds.is_empty());
}

#[test]
fn frozen_outer_loop_keeps_the_policy() {
    let mut cfg = quick().no_kl();
    cfg.alpha = 0.0;
    let mut st = state(&cfg);
    let before = st.policy.clone();
    st.run_round(&splits().train, &splits().val).unwrap();
    assert_eq!(st.policy, before);
    assert_eq!(st.trace.records.len(), 10);
}

#[test]
fn kl_term_vanishes_on_the_first_update() {
    // anchored at round start, so one update with or without KL is the same
    let one = SearchConfig {
        n_rounds: 1,
        n_total: 21,
        ..quick()
    };
    let plain = SearchConfig {
        lambda: 0.0,
        mode: augsearch::search::SearchMode {
            kl_on: false,
            ..one.mode.clone()
        },
        ..one.clone()
    };
    let a = run_search(&one, &splits().train, &splits().val).unwrap();
    let b = run_search(&plain, &splits().train, &splits().val).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_ne!(a.policy, one.initial_policy().unwrap());
}

#[test]
fn cold_start_restores_theta0() {
    let cfg = quick();
    let mut st = state(&cfg);
    let theta0 = st.theta0(0).to_vec();
    for _ in 0..2 {
        st.run_round(&splits().train, &splits().val).unwrap();
        assert_ne!(st.theta(0), &theta0[..]);
        st.begin_round().unwrap();
        assert_eq!(st.theta(0), &theta0[..]);
        assert_eq!(st.anchor, st.policy);
    }

    let mut warm = state(&quick().warm_start());
    warm.run_round(&splits().train, &splits().val).unwrap();
    let carried = warm.theta(0).to_vec();
    warm.begin_round().unwrap();
    assert_eq!(warm.theta(0), &carried[..]);
}

#[test]
fn single_stage_anchors_at_uniform() {
    let cfg = quick().single_stage();
    let out = run_search(&cfg, &splits().train, &splits().val).unwrap();
    assert_eq!(out.trace.records.len(), 2 * 10);
    assert_eq!(out.trace.rounds.len(), 1);
    let uniform = cfg.initial_policy().unwrap();
    let last = out.trace.records.last().unwrap();
    let (kl, _) = out.policy.kl_to_anchor(&uniform).unwrap();
    assert!((last.kl_to_anchor - kl).abs() < 1e-12);
    assert!(out.trace.records.iter().all(|r| r.round == 0));
}

#[test]
fn trace_is_reproducible_and_mode_independent() {
    let cfg = quick();
    let a = run_search(&cfg, &splits().train, &splits().val).unwrap();
    let b = run_search(&cfg.clone().ensemble(1), &splits().train, &splits().val).unwrap();
    let seq = SearchConfig {
        execution: Execution::Sequential,
        ..cfg.clone()
    };
    let c = run_search(&seq, &splits().train, &splits().val).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace, c.trace);
    assert_eq!(a.policy, c.policy);
    assert_eq!(a.trace.records.len(), 20);
    let steps: Vec<usize> = a.trace.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..20).collect::<Vec<_>>());
}

#[test]
fn ensemble_averages_replicas() {
    let cfg = quick().ensemble(2);
    let out = run_search(&cfg, &splits().train, &splits().val).unwrap();
    assert_eq!(out.pretrained.len(), 2);
    assert_ne!(out.pretrained[0].params, out.pretrained[1].params);
    let single = run_search(&quick(), &splits().train, &splits().val).unwrap();
    assert_eq!(out.pretrained[0].params, single.pretrained[0].params);
    assert_ne!(out.policy, single.policy);
}

#[test]
fn trace_csv_round_trip() {
    let out = run_search(&quick(), &splits().train, &splits().val).unwrap();
    let text = out.trace.to_csv();
    let back = PolicyTrace::from_csv(&text).unwrap();
    assert_eq!(back.records, out.trace.records);
    assert_eq!(back.transforms, out.trace.transforms);
    assert!(PolicyTrace::from_csv("step,round\n1").is_err());
}

#[test]
fn zero_step_pretraining_is_the_seeded_init() {
    let cfg = quick();
    let arch = cfg.architecture(&splits().train).unwrap();
    let p = pretrain(arch, &cfg, &splits().train, 0, 0).unwrap();
    assert_eq!(p.params, initial_params(arch, &cfg, 0).unwrap());
    assert!(p.losses.is_empty());
    let other = initial_params(arch, &cfg, 1).unwrap();
    assert_ne!(other, p.params);
}

#[test]
fn pretraining_descends_and_samples_uniformly() {
    let cfg = SearchConfig {
        seed: 3,
        ..SearchConfig::default()
    };
    let s = splits();
    let arch = cfg.architecture(&s.train).unwrap();
    let steps = 500;
    let p = pretrain(arch, &cfg, &s.train, 0, steps).unwrap();
    assert_eq!(p.losses.len(), steps);
    let head: f64 = p.losses[..25].iter().sum::<f64>() / 25.0;
    let tail: f64 = p.losses[steps - 25..].iter().sum::<f64>() / 25.0;
    assert!(tail < head, "{head} -> {tail}");
    let clean = s.train.examples();
    let start =
        augsearch::predictor::loss(&arch, &initial_params(arch, &cfg, 0).unwrap().theta, &clean)
            .unwrap();
    let end = augsearch::predictor::loss(&arch, &p.params.theta, &clean).unwrap();
    assert!(end < start, "{start} -> {end}");

    let n = cfg.transforms.len() as f64;
    let total: u64 = p.transform_counts.iter().sum();
    assert_eq!(total as usize, steps * cfg.n_aug * cfg.num_slots);
    let q = 1.0 / n;
    let se = (q * (1.0 - q) / total as f64).sqrt();
    for &c in &p.transform_counts {
        assert!((c as f64 / total as f64 - q).abs() < 4.0 * se);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s = splits();
    let bad = SearchConfig {
        n_retrain: 50,
        n_total: 40,
        ..quick()
    };
    assert!(run_search(&bad, &s.train, &s.val).is_err());
    let bad = quick().ensemble(0);
    assert!(run_search(&bad, &s.train, &s.val).is_err());
    let bad = SearchConfig {
        lambda: 0.0,
        ..quick()
    };
    assert!(bad.validate().is_err());
    let big = SearchConfig {
        train_batch_size: 10_000,
        ..quick()
    };
    let abort = run_search(&big, &s.train, &s.val).unwrap_err();
    assert!(abort.trace.records.is_empty());
}

#[test]
fn anchoring_limits_per_round_movement() {
    // same run without the KL term: identical first step, larger drift
    let cfg = SearchConfig {
        n_rounds: 4,
        seed: 1,
        ..SearchConfig::default()
    };
    let free = SearchConfig {
        lambda: 0.0,
        mode: augsearch::search::SearchMode {
            kl_on: false,
            ..cfg.mode.clone()
        },
        ..cfg.clone()
    };
    let s = splits();
    let a = run_search(&cfg, &s.train, &s.val).unwrap();
    let b = run_search(&free, &s.train, &s.val).unwrap();
    assert_eq!(a.trace.records[0].probs, b.trace.records[0].probs);
    for (ra, rb) in a.trace.rounds.iter().zip(&b.trace.rounds) {
        println!(
            "round {}: anchored {:.5} free {:.5}",
            ra.round, ra.kl_to_anchor, rb.kl_to_anchor
        );
    }
    for (ra, rb) in a.trace.rounds.iter().zip(&b.trace.rounds) {
        assert!(ra.kl_to_anchor < rb.kl_to_anchor);
    }
}

#[test]
fn flips_change_the_run_and_the_trace_rebuilds_the_policy() {
    let plain = run_search(&quick(), &splits().train, &splits().val).unwrap();
    let cfg = SearchConfig {
        hflip: true,
        ..quick()
    };
    let flipped = run_search(&cfg, &splits().train, &splits().val).unwrap();
    assert_eq!(flipped.trace.records.len(), plain.trace.records.len());
    assert_ne!(flipped.trace.records, plain.trace.records);

    let rebuilt = plain.trace.policy_at(None, plain.policy.sigma()).unwrap();
    for (a, b) in rebuilt.probs().iter().zip(plain.policy.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(rebuilt.mag_upper(), plain.policy.mag_upper());
    assert!(plain.trace.policy_at(Some(10_000), 0.1).is_err());
}
