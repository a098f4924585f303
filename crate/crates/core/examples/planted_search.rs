//! CADDA on the planted-invariance task; prints sign_flip selection mass per class.
//!
//! usage: planted_search [seed] [xi_policy] [epochs] [n_train]

use std::time::Instant;

use augsearch::augment::{Montage, OpKind};
use augsearch::data::{generate_synthetic, SyntheticSpec};
use augsearch::rng::RandomStream;
use augsearch::search::{run_gradient_search, DataSplits, SearchConfig, SearchMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let seed: u64 = arg(1, "0").parse().unwrap();
    let xi_policy: f64 = arg(2, "5e4").parse().unwrap();
    let epochs: usize = arg(3, "2").parse().unwrap();
    let n_train: usize = arg(4, "400").parse().unwrap();
    let spec = SyntheticSpec::default();
    let rng = RandomStream::new(seed, 0);
    let train = generate_synthetic(&spec, n_train, &rng.derive_named("train")).unwrap();
    let valid = generate_synthetic(&spec, 200, &rng.derive_named("valid")).unwrap();
    let test = generate_synthetic(&spec, 50, &rng.derive_named("test")).unwrap();
    let splits = DataSplits {
        train: &train.batch,
        valid: &valid.batch,
        test: &test.batch,
        n_classes: 2,
    };
    let cfg = SearchConfig {
        mode: SearchMode::Cadda,
        xi_policy,
        epochs,
        retrain_every: None,
        ..SearchConfig::default()
    };
    let montage = Montage::builtin().select(&train.channel_names).unwrap();
    let start = Instant::now();
    let r = run_gradient_search(&splits, Some(&montage), &cfg, &rng.derive_named("search")).unwrap();
    let mass = r.final_policy.selection_mass(OpKind::SignFlip);
    println!(
        "seed {seed} xi {xi_policy} steps {} mass {:?} ratio {:.3} ({:.0} s)",
        r.steps,
        mass,
        mass[0] / mass[1],
        start.elapsed().as_secs_f64()
    );
    for kind in OpKind::differentiable_pool() {
        let m = r.final_policy.selection_mass(kind);
        println!("  {:<18} {:.3} {:.3}", kind.name(), m[0], m[1]);
    }
}
