use super::*;
use crate::autodiff::Tensor;
use crate::data::{generate_synthetic, Dataset, SyntheticSpec};

fn small_data(seed: u64, n: usize) -> Dataset {
    let spec = SyntheticSpec {
        n_times: 512,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, n, &RandomStream::new(seed, 0)).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        patience: 2,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn tiny_search(mode: SearchMode) -> SearchConfig {
    SearchConfig {
        mode,
        pool: vec![OpKind::SignFlip, OpKind::TimeMask, OpKind::GaussianNoise],
        n_subpolicies: 2,
        n_stages: 2,
        batch_size: 4,
        epochs: 1,
        max_steps: Some(3),
        retrain_every: None,
        train: tiny_train(),
        ..SearchConfig::default()
    }
}

fn scalar(v: f64) -> Params {
    Params {
        tensors: vec![Tensor::scalar(v)],
    }
}

/// Quartic toy where central differences are not exact:
/// L_tr = (t - a)^2 / 2 + c (t - a)^4 / 4, L_val = t^2 / 2.
fn quartic_error(epsilon: f64) -> f64 {
    let (theta, alpha, xi, c): (f64, f64, f64, f64) = (0.7, 0.2, 0.1, 1.0);
    let r = theta - alpha;
    let unrolled = theta - xi * (r + c * r.powi(3));
    // d/da of L_val(unrolled(a)) = unrolled * d unrolled / da
    let exact = unrolled * (xi * (1.0 + 3.0 * c * r * r));
    let grad_alpha = |p: &Params| -> Result<Vec<f64>> {
        let r = p.tensors[0].item() - alpha;
        Ok(vec![-r - c * r.powi(3)])
    };
    let fd = finite_difference_hypergradient(&scalar(theta), &scalar(unrolled), epsilon, xi, grad_alpha).unwrap();
    (fd[0] - exact).abs()
}

#[test]
fn hypergradient_error_shrinks_quadratically() {
    let (e1, e2) = (quartic_error(1e-2), quartic_error(5e-3));
    let ratio = e1 / e2;
    assert!(e1 > 0.0 && e1 < 1e-4, "error {e1}");
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn epsilon_rules() {
    assert_eq!(EpsilonRule::Scaled(0.01).epsilon(4.0), 0.0025);
    assert_eq!(EpsilonRule::Fixed(0.3).epsilon(4.0), 0.3);
}

/// Validation loss after one unrolled step, as a function of the policy.
fn unrolled_valid_loss(
    net: &ChambonNet,
    theta: &Params,
    alpha: &PolicySet,
    train: &SignalBatch,
    valid: &SignalBatch,
    xi: f64,
    noise: &RandomStream,
) -> f64 {
    let e = augmented_loss(net, theta, alpha, train, None, noise.clone(), true, false).unwrap();
    let mut unrolled = theta.clone();
    unrolled.axpy(-xi, e.theta_grad.as_ref().unwrap());
    net.loss_and_grad(&unrolled, &valid.data, &valid.labels, None).unwrap().0
}

#[test]
fn network_hypergradient_matches_finite_differences_in_policy() {
    // single-op stages leave no categorical choice, so the whole gradient is
    // the pathwise part and must match d L_val(theta') / d alpha; a small
    // step keeps the central difference from straddling ReLU kinks
    let data = small_data(3, 12);
    let train = data.batch.select(&[0, 1, 2, 3, 4, 5]);
    let valid = data.batch.select(&[6, 7, 8, 9, 10, 11]);
    let cfg = SearchConfig {
        pool: vec![OpKind::GaussianNoise],
        n_subpolicies: 1,
        n_stages: 2,
        xi_model: 0.5,
        epsilon: EpsilonRule::Scaled(1e-4),
        ..tiny_search(SearchMode::Adda)
    };
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let root = RandomStream::new(11, 0);
    let theta = net.init(&mut root.derive_named("init"));
    let alpha = cfg.initial_policy(2).unwrap();
    let noise = root.derive_named("noise");
    let mut state = HyperGradState::new(theta.clone(), alpha.clone(), &cfg.train, root.derive_named("critic"));
    let (g, _, _) = hypergradient(&mut state, &net, &train, &valid, &cfg, None, &noise).unwrap();
    let g = g.unwrap();
    let base = alpha.params();
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut max_ref: f64 = 0.0;
    for i in 0..base.len() {
        let shifted = |d: f64| {
            let mut a = alpha.clone();
            let mut p = base.clone();
            p[i] += d;
            a.set_params(&p).unwrap();
            unrolled_valid_loss(&net, &theta, &a, &train, &valid, cfg.xi_model, &noise)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        max_err = max_err.max((fd - g[i]).abs());
        max_ref = max_ref.max(fd.abs());
    }
    assert!(max_ref > 1e-6, "degenerate check, reference {max_ref}");
    assert!(max_err <= 1e-4 * max_ref, "error {max_err} vs scale {max_ref}");
}

#[test]
fn frozen_policy_step_is_plain_training() {
    let data = small_data(4, 16);
    let train = data.batch.select(&(0..8).collect::<Vec<_>>());
    let valid = data.batch.select(&(8..16).collect::<Vec<_>>());
    let cfg = SearchConfig {
        xi_policy: 0.0,
        ..tiny_search(SearchMode::Adda)
    };
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let root = RandomStream::new(5, 0);
    let theta = net.init(&mut root.derive_named("init"));
    let alpha = cfg.initial_policy(2).unwrap();
    let mut state = HyperGradState::new(theta.clone(), alpha.clone(), &cfg.train, root.derive_named("critic"));
    let mut streams = TrainStreams::from(&root.derive_named("model"));
    let mut plain_theta = theta;
    let mut plain_adam = Adam::new(&plain_theta, &cfg.train);
    let mut plain_streams = TrainStreams::from(&root.derive_named("model"));
    for step in 0..3u64 {
        adda_step(&mut state, &net, &train, &valid, &cfg, None, &root.derive(step), &mut streams).unwrap();
        let b = apply_policy(&alpha, &train, None, &mut plain_streams.augment).unwrap();
        let (_, g) = net
            .loss_and_grad(&plain_theta, &b.data, &b.labels, Some(&mut plain_streams.dropout))
            .unwrap();
        plain_adam.step(&mut plain_theta, &g);
    }
    assert_eq!(state.alpha, alpha);
    assert_eq!(state.theta, plain_theta);
}

#[test]
fn policy_moves_and_stays_feasible() {
    let data = small_data(6, 16);
    let (train, valid) = (data.batch.select(&[0, 1, 2, 3]), data.batch.select(&[4, 5, 6, 7]));
    let cfg = tiny_search(SearchMode::Adda);
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let root = RandomStream::new(8, 0);
    let alpha = cfg.initial_policy(2).unwrap();
    let mut state = HyperGradState::new(net.init(&mut root.derive_named("init")), alpha.clone(), &cfg.train, root.clone());
    let mut streams = TrainStreams::from(&root);
    let r = adda_step(&mut state, &net, &train, &valid, &cfg, None, &root.derive(0), &mut streams).unwrap();
    assert!(r.alpha_grad.as_ref().unwrap().iter().all(|v| v.is_finite()));
    assert_ne!(state.alpha.params(), alpha.params());
    let mut projected = state.alpha.clone();
    projected.project();
    assert_eq!(projected, state.alpha);
}

fn one_class(mut d: Dataset) -> Dataset {
    d.batch.labels.iter_mut().for_each(|y| *y = 0);
    d
}

#[test]
fn class_wise_with_one_class_equals_shared() {
    let data = one_class(small_data(7, 24));
    let idx = |r: std::ops::Range<usize>| data.batch.select(&r.collect::<Vec<_>>());
    let (train, valid, test) = (idx(0..12), idx(12..18), idx(18..24));
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 1,
    };
    let rng = RandomStream::new(9, 0);
    let a = run_gradient_search(&splits, None, &tiny_search(SearchMode::Adda), &rng).unwrap();
    let c = run_gradient_search(&splits, None, &tiny_search(SearchMode::Cadda), &rng).unwrap();
    assert_eq!(a.steps, 3);
    assert_eq!(a.final_policy.params(), c.final_policy.params());
    assert_eq!(strip_wall_time(&a.trace.to_csv()), strip_wall_time(&c.trace.to_csv()));
}

fn splits_fixture(data: &Dataset) -> (SignalBatch, SignalBatch, SignalBatch) {
    let n = data.batch.n_examples();
    let idx = |r: std::ops::Range<usize>| data.batch.select(&r.collect::<Vec<_>>());
    (idx(0..n / 2), idx(n / 2..3 * n / 4), idx(3 * n / 4..n))
}

#[test]
fn zero_budget_still_retrains_once() {
    let data = small_data(10, 24);
    let (train, valid, test) = splits_fixture(&data);
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 2,
    };
    let cfg = SearchConfig {
        epochs: 0,
        retrain_every: Some(1),
        ..tiny_search(SearchMode::Cadda)
    };
    let r = run_gradient_search(&splits, None, &cfg, &RandomStream::new(1, 0)).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(r.trace.rows.len(), 1);
    let row = &r.trace.rows[0];
    assert_eq!(row.step, 0);
    assert_eq!(row.policy_snapshot_path.as_deref(), Some("snapshots/retrain_000.json"));
    assert_eq!(r.snapshots.len(), 1);
    assert_eq!(r.best_policy, cfg.initial_policy(2).unwrap().discretize());
}

#[test]
fn trace_is_ordered_and_reproducible() {
    let data = small_data(12, 24);
    let (train, valid, test) = splits_fixture(&data);
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 2,
    };
    let cfg = SearchConfig {
        epochs: 2,
        max_steps: None,
        retrain_every: Some(1),
        ..tiny_search(SearchMode::Adda)
    };
    let rng = RandomStream::new(2, 0);
    let r = run_gradient_search(&splits, None, &cfg, &rng).unwrap();
    // 12 train windows at batch 4: three steps per epoch, a retrain after each
    assert_eq!(r.steps, 6);
    assert_eq!(r.trace.rows.len(), 8);
    assert_eq!(r.trace.retrains().count(), 2);
    for w in r.trace.rows.windows(2) {
        assert!(w[0].step <= w[1].step);
        assert!(w[0].wall_time_s <= w[1].wall_time_s);
    }
    let running: Vec<f64> = r.trace.retrains().map(|x| x.running_test_balacc.unwrap()).collect();
    assert_eq!(running.len(), 2);
    let csv = r.trace.to_csv();
    assert!(csv.starts_with(TRACE_HEADER));
    let again = run_gradient_search(&splits, None, &cfg, &rng).unwrap();
    assert_eq!(strip_wall_time(&csv), strip_wall_time(&again.trace.to_csv()));
}

#[test]
fn divergence_halts_the_search() {
    let data = small_data(13, 24);
    let (train, valid, test) = splits_fixture(&data);
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 2,
    };
    // any finite validation loss exceeds zero times the initial one
    let cfg = SearchConfig {
        epochs: 5,
        max_steps: None,
        retrain_every: Some(1),
        divergence_factor: 0.0,
        divergence_patience: 2,
        ..tiny_search(SearchMode::Adda)
    };
    let r = run_gradient_search(&splits, None, &cfg, &RandomStream::new(3, 0)).unwrap();
    assert!(r.halted);
    assert_eq!(r.trace.retrains().count(), 2);
    assert!(r.trace.events.iter().any(|e| e.contains("halted")));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SearchConfig {
            xi_model: 0.0,
            ..SearchConfig::default()
        },
        SearchConfig {
            epsilon: EpsilonRule::Fixed(-1.0),
            ..SearchConfig::default()
        },
        SearchConfig {
            pool: vec![],
            ..SearchConfig::default()
        },
        SearchConfig {
            retrain_every: Some(0),
            ..SearchConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(SearchConfig::default().validate().is_ok());
    assert_eq!(tiny_search(SearchMode::Cadda).effective_batch_size(2), 8);
    assert_eq!(tiny_search(SearchMode::Cadda).effective_batch_size(1), 4);
    assert_eq!(tiny_search(SearchMode::Adda).effective_batch_size(2), 4);
}

#[test]
fn mode_names_round_trip() {
    for m in [SearchMode::Adda, SearchMode::Cadda, SearchMode::Dada, SearchMode::FasterAaBilevel] {
        assert_eq!(m.name().parse::<SearchMode>().unwrap(), m);
    }
    assert!("nope".parse::<SearchMode>().is_err());
}

fn grid(pool: Vec<OpKind>, np: usize, nm: usize) -> GridSpec {
    GridSpec {
        n_probabilities: np,
        n_magnitudes: nm,
        pool,
        n_subpolicies: 2,
        n_stages: 2,
        class_wise: false,
    }
}

#[test]
fn grid_values() {
    let g = grid(vec![OpKind::SignFlip], 11, 10);
    let p = g.probabilities();
    assert_eq!(p.len(), 11);
    assert_eq!((p[0], p[10]), (0.0, 1.0));
    assert!((p[3] - 0.3).abs() < 1e-15);
    let m = g.magnitudes();
    assert!((m[0] - 0.05).abs() < 1e-15 && (m[9] - 0.95).abs() < 1e-15);
    assert_eq!(grid(vec![OpKind::SignFlip], 1, 1).probabilities(), vec![0.5]);
    assert_eq!(grid(vec![OpKind::SignFlip], 1, 1).magnitudes(), vec![0.5]);
}

#[test]
fn grid_samples_lie_on_the_grid() {
    let mut g = grid(vec![OpKind::TimeMask, OpKind::SignFlip], 3, 4);
    g.class_wise = true;
    let mut rng = RandomStream::new(4, 0);
    let s = g.sample(3, &mut rng).unwrap();
    let (ps, mus) = (g.probabilities(), g.magnitudes());
    let json = s.to_json().unwrap();
    let back = PolicySet::from_json(&json).unwrap();
    assert_eq!(back, s);
    for v in s.discretize().params() {
        assert!(v.is_finite());
    }
    let _ = (ps, mus);
    let empty = grid(vec![], 0, 0);
    assert_eq!(empty.sample(2, &mut rng).unwrap(), PolicySet::identity(2));
}

#[test]
fn random_search_keeps_the_best_validation_trial() {
    let data = small_data(14, 24);
    let (train, valid, test) = splits_fixture(&data);
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 2,
    };
    let g = grid(vec![OpKind::SignFlip, OpKind::TimeReverse], 3, 3);
    let r = random_search(&g, 3, &splits, None, &tiny_train(), &RandomStream::new(5, 0)).unwrap();
    assert_eq!(r.trials.len(), 3);
    let best = r
        .trials
        .iter()
        .fold(None::<&TrialRow>, |b, t| match b {
            Some(b) if b.valid_balacc >= t.valid_balacc => Some(b),
            _ => Some(t),
        })
        .unwrap();
    assert_eq!(r.best_valid_balacc, best.valid_balacc);
    assert_eq!(r.best_test_balacc, best.test_balacc);
    assert_eq!(r.trials.last().unwrap().running_test_balacc, best.test_balacc);
    assert_eq!(r.to_csv().lines().count(), 4);
}

#[test]
fn density_matching_ranks_by_augmented_loss() {
    let data = small_data(15, 16);
    let valid = data.batch.select(&(0..16).collect::<Vec<_>>());
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let rng = RandomStream::new(6, 0);
    let params = net.init(&mut rng.derive_named("init"));
    let noisy = PolicySet::shared(
        Policy::from_specs(&[vec![AugOpSpec::new(OpKind::GaussianNoise, 1.0, 1.0).unwrap()]]),
        2,
    );
    let cands = vec![noisy.clone(), PolicySet::identity(2), PolicySet::identity(2), noisy];
    let ranked = density_matching_search(&cands, &net, &params, &valid, None, &rng).unwrap();
    let clean = net.loss(&params, &valid).unwrap();
    let identity: Vec<&Ranked> = ranked.iter().filter(|r| r.index == 1 || r.index == 2).collect();
    assert_eq!(identity[0].score, clean);
    assert_eq!(identity[1].score, clean);
    // same stream for every candidate: equal policies tie, and ties keep order
    let pos = |i| ranked.iter().position(|r| r.index == i).unwrap();
    assert!(pos(1) < pos(2) && pos(0) < pos(3));
    assert_eq!(ranked[pos(0)].score, ranked[pos(3)].score);
    assert!(ranked.windows(2).all(|w| w[0].score <= w[1].score));
}


fn frozen_off(mut set: PolicySet) -> PolicySet {
    if let PolicySet::Shared { policy, .. } = &mut set {
        for st in policy.subpolicies.iter_mut().flat_map(|s| &mut s.stages) {
            st.p.iter_mut().for_each(|p| *p = 0.0);
        }
    }
    set
}

#[test]
fn policy_that_never_fires_gets_zero_gradient() {
    let data = small_data(16, 8);
    let (train, valid) = (data.batch.select(&[0, 1, 2, 3]), data.batch.select(&[4, 5, 6, 7]));
    let cfg = tiny_search(SearchMode::Adda);
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let root = RandomStream::new(17, 0);
    let alpha = frozen_off(cfg.initial_policy(2).unwrap());
    let mut state = HyperGradState::new(net.init(&mut root.derive_named("init")), alpha.clone(), &cfg.train, root.clone());
    let mut streams = TrainStreams::from(&root);
    for s in 0..2 {
        let r = adda_step(&mut state, &net, &train, &valid, &cfg, None, &root.derive(s), &mut streams).unwrap();
        assert!(r.alpha_grad.unwrap().iter().all(|&g| g == 0.0));
    }
    assert_eq!(state.alpha, alpha);
}

/// Two classes that differ only in the sign of a bump.
fn sign_coded(n: usize, rng: &mut RandomStream) -> SignalBatch {
    let (c, t) = (2, 512);
    let mut data = Vec::with_capacity(n * c * t);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let sign = if y == 0 { 1.0 } else { -1.0 };
        for _ in 0..c {
            for j in 0..t {
                let bump = (-((j as f64 - 256.0) / 40.0).powi(2)).exp();
                data.push(sign * 2.0 * bump + 0.3 * rng.normal());
            }
        }
    }
    SignalBatch::new(Tensor::new(vec![n, c, t], data).unwrap(), 128.0, labels).unwrap()
}

#[test]
fn density_matching_penalizes_label_destroying_policy() {
    let mut rng = RandomStream::new(18, 0);
    let train = sign_coded(32, &mut rng);
    let valid = sign_coded(16, &mut rng);
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 15,
        patience: 15,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let fitted = fit(&net, net.init(&mut rng), &train, &valid, None, None, &cfg, &rng).unwrap();
    let flip = PolicySet::shared(
        Policy::from_specs(&[vec![AugOpSpec::new(OpKind::SignFlip, 1.0, 0.0).unwrap()]]),
        2,
    );
    let ranked = density_matching_search(
        &[flip, PolicySet::identity(2)],
        &net,
        &fitted.params,
        &valid,
        None,
        &rng,
    )
    .unwrap();
    assert_eq!(ranked[0].index, 1);
    assert!(ranked[0].score < ranked[1].score);
    let empty = density_matching_search(&[], &net, &fitted.params, &valid, None, &rng).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn identity_only_space_returns_identity() {
    let data = small_data(19, 24);
    let (train, valid, test) = splits_fixture(&data);
    let splits = DataSplits {
        train: &train,
        valid: &valid,
        test: &test,
        n_classes: 2,
    };
    let r = random_search(&grid(vec![], 0, 0), 2, &splits, None, &tiny_train(), &RandomStream::new(1, 0)).unwrap();
    assert_eq!(r.best, PolicySet::identity(2));
}
