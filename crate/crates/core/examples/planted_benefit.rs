//! Retrains under the planted class-wise policy, every single class-agnostic
//! augmentation and one-class sign flips; prints scores per policy.
//!
//! usage: planted_benefit [seed] [n_train] [max_epochs] [patience]

use std::time::Instant;

use augsearch::augment::{AugOpSpec, Montage, OpKind};
use augsearch::data::{generate_synthetic, SyntheticSpec};
use augsearch::model::TrainConfig;
use augsearch::policy::{Policy, PolicySet};
use augsearch::rng::RandomStream;
use augsearch::search::{retrain, DataSplits};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let seed: u64 = arg(1, "0").parse().unwrap();
    let n_train: usize = arg(2, "200").parse().unwrap();
    let max_epochs: usize = arg(3, "40").parse().unwrap();
    let patience: usize = arg(4, "10").parse().unwrap();
    let spec = SyntheticSpec::default();
    let rng = RandomStream::new(seed, 0);
    let train = generate_synthetic(&spec, n_train, &rng.derive_named("train")).unwrap();
    let valid = generate_synthetic(&spec, 200, &rng.derive_named("valid")).unwrap();
    let test = generate_synthetic(&spec, 400, &rng.derive_named("test")).unwrap();
    let splits = DataSplits {
        train: &train.batch,
        valid: &valid.batch,
        test: &test.batch,
        n_classes: 2,
    };
    let montage = Montage::builtin().select(&train.channel_names).unwrap();
    let cfg = TrainConfig {
        max_epochs,
        patience,
        ..TrainConfig::default()
    };
    let single = |kind: OpKind| Policy::from_specs(&[vec![AugOpSpec::new(kind, 0.5, 0.5).unwrap()]]);
    let mut runs: Vec<(String, Option<PolicySet>)> = vec![
        ("none".into(), None),
        (
            "cw_planted".into(),
            Some(PolicySet::class_wise(vec![single(OpKind::SignFlip), Policy::identity()])),
        ),
        (
            "flip_class1".into(),
            Some(PolicySet::class_wise(vec![Policy::identity(), single(OpKind::SignFlip)])),
        ),
    ];
    for kind in OpKind::differentiable_pool() {
        runs.push((kind.name().into(), Some(PolicySet::shared(single(kind), 2))));
    }
    let net = splits.network().unwrap();
    for (name, policy) in runs {
        let start = Instant::now();
        let (r, params) = retrain(&splits, policy.as_ref(), Some(&montage), &cfg, &rng.derive_named("retrain")).unwrap();
        let f1 = net.evaluate(&params, &test.batch).unwrap().per_class_f1;
        println!(
            "{seed} {name:<18} valid {:.4} test {:.4} f1 {:.4} {:.4} ({:.1} s)",
            r.valid_balanced_accuracy,
            r.test_balanced_accuracy,
            f1[0].unwrap_or(f64::NAN),
            f1[1].unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    }
}
