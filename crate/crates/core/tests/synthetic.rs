//! End-to-end checks on the synthetic planted-invariance task.

use std::time::Instant;

use augsearch::augment::{AugOpSpec, Montage, OpKind};
use augsearch::data::{generate_synthetic, SyntheticSpec};
use augsearch::model::{fit, ChambonNet, ChambonNetConfig, TrainConfig};
use augsearch::policy::{Policy, PolicySet};
use augsearch::rng::RandomStream;
use augsearch::search::{retrain, DataSplits};

#[test]
fn default_task_is_learnable() {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let rng = RandomStream::new(2024, 0);
    let train = generate_synthetic(&spec, 800, &rng.derive_named("train")).unwrap();
    let valid = generate_synthetic(&spec, 200, &rng.derive_named("valid")).unwrap();
    let test = generate_synthetic(&spec, 200, &rng.derive_named("test")).unwrap();
    let net = ChambonNet::new(ChambonNetConfig::new(2, spec.n_times, 2)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 10,
        ..TrainConfig::default()
    };
    let init = net.init(&mut rng.derive_named("init"));
    let fit = fit(&net, init, &train.batch, &valid.batch, None, None, &cfg, &rng).unwrap();
    let report = net.evaluate(&fit.params, &test.batch).unwrap();
    println!(
        "held-out balanced accuracy {:.3} after {} epochs ({:.1} s)",
        report.balanced_accuracy,
        fit.history.len(),
        start.elapsed().as_secs_f64()
    );
    assert!(report.balanced_accuracy >= 0.9);
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn sign_flip_only_hurts_the_asymmetric_class() {
    let spec = SyntheticSpec::default();
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 10,
        ..TrainConfig::default()
    };
    let flip = || Policy::from_specs(&[vec![AugOpSpec::new(OpKind::SignFlip, 0.5, 0.5).unwrap()]]);
    let (mut drop_invariant, mut drop_asymmetric) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let rng = RandomStream::new(seed, 0);
        let train = generate_synthetic(&spec, 200, &rng.derive_named("train")).unwrap();
        let valid = generate_synthetic(&spec, 200, &rng.derive_named("valid")).unwrap();
        let test = generate_synthetic(&spec, 400, &rng.derive_named("test")).unwrap();
        let splits = DataSplits {
            train: &train.batch,
            valid: &valid.batch,
            test: &test.batch,
            n_classes: 2,
        };
        let montage = Montage::builtin().select(&train.channel_names).unwrap();
        let f1 = |policy: Option<PolicySet>| {
            let (_, params) = retrain(&splits, policy.as_ref(), Some(&montage), &cfg, &rng.derive_named("retrain")).unwrap();
            let report = splits.network().unwrap().evaluate(&params, &test.batch).unwrap();
            report.per_class_f1.iter().map(|f| f.unwrap()).collect::<Vec<_>>()
        };
        let plain = f1(None);
        let on_invariant = f1(Some(PolicySet::class_wise(vec![flip(), Policy::identity()])));
        let on_asymmetric = f1(Some(PolicySet::class_wise(vec![Policy::identity(), flip()])));
        drop_invariant.push(plain[0] - on_invariant[0]);
        drop_asymmetric.push(plain[1] - on_asymmetric[1]);
    }
    let (a, b) = (median(drop_invariant), median(drop_asymmetric));
    println!("median F1 drop: invariant class {a:.4}, asymmetric class {b:.4}");
    assert!(a <= 0.01, "invariant class lost {a}");
    assert!(b >= 0.03, "asymmetric class lost only {b}");
}
