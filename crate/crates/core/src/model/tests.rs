use super::*;
use crate::autodiff::grad_check;
use crate::policy::PolicySet;

fn toy_batch(n: usize, c: usize, t: usize, sfreq: f64, noise: f64, rng: &mut RandomStream) -> SignalBatch {
    let mut data = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let freq = if y == 0 { 4.0 } else { 16.0 };
        let phase = rng.uniform() * std::f64::consts::TAU;
        for _ in 0..c {
            for k in 0..t {
                let s = (std::f64::consts::TAU * freq * k as f64 / sfreq + phase).sin();
                data.push(s + noise * rng.normal());
            }
        }
        labels.push(y);
    }
    SignalBatch::new(Tensor::from_parts(vec![n, c, t], data), sfreq, labels).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn parameter_counts_per_layer() {
    let net = ChambonNet::new(ChambonNetConfig::new(6, 3840, 5)).unwrap();
    let counts: Vec<usize> = net
        .param_specs()
        .iter()
        .map(|(_, s)| s.iter().product())
        .collect();
    assert_eq!(counts, vec![36, 512, 8, 4096, 8, 3600]);
    assert_eq!(counts[1] + counts[2], 520);
    assert_eq!(counts[3] + counts[4], 4104);
    assert_eq!(net.n_params(), 36 + 520 + 4104 + 3600);
}

#[test]
fn short_windows_are_rejected() {
    assert!(ChambonNet::new(ChambonNetConfig::new(2, 511, 2)).is_err());
    assert!(ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).is_ok());
    assert!(ChambonNet::new(ChambonNetConfig::new(2, 512, 1)).is_err());
}

#[test]
fn forward_gives_normalised_log_probabilities() {
    let net = ChambonNet::new(ChambonNetConfig::new(3, 768, 4)).unwrap();
    let mut rng = RandomStream::new(1, 0);
    let params = net.init(&mut rng);
    let x = Tensor::from_parts(vec![5, 3, 768], rng.normals(5 * 3 * 768));
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let logp = net.forward(&vars, tape.constant(x), None).unwrap().tensor();
    assert_eq!(logp.shape(), &[5, 4]);
    for row in logp.data().chunks(4) {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn init_respects_fan_in_bounds() {
    let net = ChambonNet::new(ChambonNetConfig::new(6, 3840, 5)).unwrap();
    let params = net.init(&mut RandomStream::new(3, 0));
    let fan = [6.0, 64.0, 64.0, 512.0, 512.0, 720.0_f64];
    for (t, f) in params.tensors.iter().zip(fan) {
        let bound = 1.0 / f.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let max = t.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max > 0.5 * bound);
    }
}

#[test]
fn nll_matches_direct_sum() {
    let tape = Tape::new();
    let logits = Tensor::from_parts(vec![3, 3], vec![0.1, -0.4, 2.0, 1.0, 1.0, 1.0, -3.0, 0.5, 0.0]);
    let logp = tape.constant(logits.clone()).log_softmax();
    let labels = [2, 0, 1];
    let got = nll(logp, &labels).unwrap().item();
    let mut want = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    assert!((got - want / 3.0).abs() < 1e-12);
    assert!(nll(logp, &[0, 3, 1]).is_err());
}

#[test]
fn network_gradients_match_finite_differences() {
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 3)).unwrap();
    let mut rng = RandomStream::new(11, 0);
    let params = net.init(&mut rng);
    let x = Tensor::from_parts(vec![2, 2, 512], rng.normals(2 * 2 * 512));
    let labels = [0usize, 2];
    for which in 0..params.tensors.len() {
        let (p, x, labels) = (params.clone(), x.clone(), labels);
        let report = grad_check(
            move |tape, v| {
                let mut vars = p.bind(tape, false);
                vars[which] = v;
                let logp = net.forward(&vars, tape.constant(x.clone()), None)?;
                nll(logp, &labels)
            },
            &params.tensors[which],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "parameter {which}: {report:?}");
    }
}

#[test]
fn dropout_only_when_training() {
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let mut rng = RandomStream::new(5, 0);
    let params = net.init(&mut rng);
    let x = Tensor::from_parts(vec![4, 2, 512], rng.normals(4 * 2 * 512));
    let eval = |drop: Option<&mut RandomStream>| {
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        net.forward(&vars, tape.constant(x.clone()), drop).unwrap().tensor()
    };
    assert_eq!(eval(None), eval(None));
    let mut d = RandomStream::new(6, 0);
    assert_ne!(eval(Some(&mut d)), eval(None));
    let p1 = net.predict(&params, &x).unwrap();
    assert_eq!(p1, net.predict(&params, &x).unwrap());
}

#[test]
fn adam_first_step_matches_closed_form() {
    let cfg = TrainConfig::default();
    let mut p = Params {
        tensors: vec![Tensor::from_parts(vec![3], vec![1.0, -2.0, 0.5])],
    };
    let g = Params {
        tensors: vec![Tensor::from_parts(vec![3], vec![0.3, -4.0, 0.0])],
    };
    let mut adam = Adam::new(&p, &cfg);
    adam.step(&mut p, &g);
    let want = [
        1.0 - 1e-3 * 0.3 / (0.3 + 1e-8),
        -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8),
        0.5,
    ];
    for (a, b) in p.tensors[0].data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn learns_separable_data() {
    let mut rng = RandomStream::new(21, 0);
    let train = toy_batch(64, 2, 512, 128.0, 0.3, &mut rng);
    let valid = toy_batch(32, 2, 512, 128.0, 0.3, &mut rng);
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let init = net.init(&mut rng.derive_named("init"));
    let fit = fit(&net, init, &train, &valid, None, None, &quick_config(50), &rng).unwrap();
    let report = net.evaluate(&fit.params, &train).unwrap();
    assert!(report.balanced_accuracy > 0.95, "train accuracy {}", report.balanced_accuracy);
}

#[test]
fn training_is_deterministic_and_identity_policy_is_free() {
    let mut rng = RandomStream::new(8, 0);
    let train = toy_batch(24, 2, 512, 128.0, 0.5, &mut rng);
    let valid = toy_batch(8, 2, 512, 128.0, 0.5, &mut rng);
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let init = net.init(&mut RandomStream::new(9, 0));
    let cfg = quick_config(3);
    let a = fit(&net, init.clone(), &train, &valid, None, None, &cfg, &rng).unwrap();
    let b = fit(&net, init.clone(), &train, &valid, None, None, &cfg, &rng).unwrap();
    assert_eq!(a, b);
    let identity = PolicySet::identity(2);
    let c = fit(&net, init, &train, &valid, Some(&identity), None, &cfg, &rng).unwrap();
    assert_eq!(a, c);
}

#[test]
fn early_stopping_halts_after_patience() {
    let mut rng = RandomStream::new(13, 0);
    let mut train = toy_batch(16, 2, 512, 128.0, 1.0, &mut rng);
    let valid = toy_batch(16, 2, 512, 128.0, 1.0, &mut rng);
    // random labels: validation loss cannot keep improving
    for y in train.labels.iter_mut() {
        *y = rng.below(2);
    }
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let init = net.init(&mut rng.derive_named("init"));
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 200,
        patience: 3,
        ..TrainConfig::default()
    };
    let fit = fit(&net, init, &train, &valid, None, None, &cfg, &rng).unwrap();
    assert!(fit.stopped_early);
    assert_eq!(fit.history.len(), fit.best_epoch + 1 + cfg.patience);
    let best = fit.history[fit.best_epoch].valid_loss;
    assert!(fit.history.iter().all(|h| h.valid_loss >= best));
    assert!((net.loss(&fit.params, &valid).unwrap() - best).abs() < 1e-12);
}

#[test]
fn non_finite_values_abort_training() {
    let mut rng = RandomStream::new(2, 0);
    let mut train = toy_batch(4, 2, 512, 128.0, 0.1, &mut rng);
    let valid = train.clone();
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 2)).unwrap();
    let init = net.init(&mut rng);
    let diverging = TrainConfig {
        learning_rate: 1e306,
        batch_size: 2,
        ..quick_config(2)
    };
    let err = fit(&net, init.clone(), &train, &valid, None, None, &diverging, &rng).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(msg.contains("batch 1") && msg.contains("norm"), "{msg}");

    train.data.data_mut()[7] = f64::NAN;
    assert!(fit(&net, init, &train, &valid, None, None, &quick_config(2), &rng).is_err());
}

#[test]
fn metrics_worked_example() {
    let m = MetricsReport::from_confusion(vec![vec![3, 1], vec![2, 4]]).unwrap();
    assert!((m.balanced_accuracy - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
    assert!((m.macro_f1 - (6.0 / 9.0 + 8.0 / 11.0) / 2.0).abs() < 1e-12);
    let perfect = MetricsReport::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    assert_eq!(perfect.balanced_accuracy, 1.0);
    assert_eq!(perfect.macro_f1, 1.0);
}

#[test]
fn metrics_skip_absent_classes() {
    let m = MetricsReport::from_predictions(&[0, 0, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!(m.absent_classes, vec![1]);
    assert_eq!(m.per_class_f1[1], None);
    assert!((m.balanced_accuracy - 0.75).abs() < 1e-12);
    assert!(MetricsReport::from_predictions(&[], &[], 3).is_err());
}

proptest::proptest! {
    #[test]
    fn metrics_match_precision_recall_oracle(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = MetricsReport::from_predictions(&labels, &preds, 4).unwrap();
        let mut recalls = Vec::new();
        let mut f1s = Vec::new();
        for c in 0..4 {
            let tp = pairs.iter().filter(|p| p.0 == c && p.1 == c).count() as f64;
            let actual = labels.iter().filter(|&&y| y == c).count() as f64;
            if actual == 0.0 {
                continue;
            }
            let guessed = preds.iter().filter(|&&y| y == c).count() as f64;
            let recall = tp / actual;
            let precision = if guessed > 0.0 { tp / guessed } else { 0.0 };
            recalls.push(recall);
            f1s.push(if tp > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        proptest::prop_assert!((m.balanced_accuracy - mean(&recalls)).abs() < 1e-12);
        proptest::prop_assert!((m.macro_f1 - mean(&f1s)).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = std::env::temp_dir().join(format!("augsearch-ckpt-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let net = ChambonNet::new(ChambonNetConfig::new(2, 512, 3)).unwrap();
    let params = net.init(&mut RandomStream::new(4, 0));
    save_checkpoint(&path, &net, &params).unwrap();
    let (net2, params2) = load_checkpoint(&path).unwrap();
    assert_eq!(net, net2);
    assert_eq!(params, params2);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    fs::remove_dir_all(&dir).ok();
}
