use std::fs;
use std::path::Path;

use augsearch::augment::{augment_batch, relaxation_gradcheck, AugContext, AugOpSpec, Montage, OpKind, SignalBatch};
use augsearch::autodiff::Tensor;
use augsearch::data::{
    generate_synthetic, lowpass, read_dataset, split, standardize, write_dataset, Dataset, DatasetManifest,
    Dtype, SplitPlan, SyntheticSpec,
};
use augsearch::model::{load_checkpoint, save_checkpoint, MetricsReport, TrainConfig};
use augsearch::policy::{policy_space_size, PolicySet};
use augsearch::rng::RandomStream;
use augsearch::search::{
    density_matching_search, random_search, retrain, run_gradient_search, DataSplits, EpsilonRule, GridSpec,
    SearchConfig, SearchMode, SearchTrace, TraceRow,
};
use serde_json::{json, Value};

use crate::{
    AugmentArgs, Cli, Command, DataArgs, DensityArgs, DtypeArg, EvalArgs, Format, GradcheckArgs, GridArgs,
    GridSearchArgs, ModeArg, RetrainArgs, SearchArgs, SpaceArgs, SpaceSizeArgs, SplitArg, SynthArgs, TrainArgs,
};

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<augsearch::Error> for Failure {
    fn from(e: augsearch::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Worker cap from AUGSEARCH_THREADS. Everything runs on one worker, which
/// satisfies any cap of at least one.
fn thread_cap() -> Outcome<Option<usize>> {
    match std::env::var("AUGSEARCH_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("AUGSEARCH_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let cap = thread_cap()?;
    fs::create_dir_all(&cli.out_dir)?;
    let details = match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Augment(a) => augment(cli, a)?,
        Command::Gradcheck(a) => gradcheck(cli, a)?,
        Command::Search(a) => search(cli, a)?,
        Command::RandomSearch(a) => grid_search(cli, a)?,
        Command::DensityMatch(a) => density(cli, a)?,
        Command::Retrain(a) => retrain_cmd(cli, a)?,
        Command::Eval(a) => eval(cli, a)?,
        Command::SpaceSize(a) => space_size(cli, a)?,
    };
    let record = json!({
        "tool": "augsearch",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "config": serde_json::to_value(cli).map_err(|e| Failure::Runtime(e.to_string()))?,
        "worker_threads": 1,
        "thread_cap": cap,
        "outputs": details,
    });
    write_json(&cli.out_dir.join("run.json"), &record)
}

fn write_json(path: &Path, v: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn print_summary(format: Format, rows: &[(&str, f64)]) {
    match format {
        Format::Csv => {
            println!("metric,value");
            for (k, v) in rows {
                println!("{k},{v}");
            }
        }
        Format::Json => {
            let obj: serde_json::Map<String, Value> = rows.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
            println!("{}", Value::Object(obj));
        }
    }
}

fn parse_op(name: &str) -> Outcome<OpKind> {
    name.parse::<OpKind>().map_err(|_| {
        let valid: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        Failure::Usage(format!("unknown operation '{name}'; valid: {}", valid.join(", ")))
    })
}

fn pool(space: &SpaceArgs) -> Outcome<Vec<OpKind>> {
    if space.pool.is_empty() {
        return Ok(OpKind::differentiable_pool());
    }
    space.pool.iter().map(|s| parse_op(s.trim())).collect()
}

fn train_config(t: &TrainArgs) -> Outcome<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch_size,
        max_epochs: t.max_epochs,
        patience: t.patience,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn resolve_montage(path: Option<&Path>, channels: &[String]) -> Outcome<Option<Montage>> {
    match path {
        Some(p) => Ok(Some(Montage::from_csv(p)?.select(channels)?)),
        None => Ok(Montage::builtin().select(channels).ok()),
    }
}

struct Loaded {
    dataset: Dataset,
    train: SignalBatch,
    valid: SignalBatch,
    test: SignalBatch,
    montage: Option<Montage>,
}

impl Loaded {
    fn splits(&self) -> DataSplits<'_> {
        DataSplits {
            train: &self.train,
            valid: &self.valid,
            test: &self.test,
            n_classes: self.dataset.n_classes(),
        }
    }
}

fn load(args: &DataArgs, seed: u64) -> Outcome<Loaded> {
    let mut dataset = read_dataset(&args.data)?;
    if let Some(cutoff) = args.lowpass {
        dataset.batch = lowpass(&dataset.batch, cutoff, 7.0)?;
    }
    if args.standardize {
        dataset.batch = standardize(&dataset.batch)?;
    }
    let plan = SplitPlan {
        test_fraction: args.test_fraction,
        valid_fraction: args.valid_fraction,
        subset_exponent: args.subset_exponent,
        seed,
    };
    let s = split(&dataset.batch.labels, &plan)?;
    let montage = resolve_montage(args.montage.as_deref(), &dataset.channel_names)?;
    Ok(Loaded {
        train: dataset.batch.select(&s.train),
        valid: dataset.batch.select(&s.valid),
        test: dataset.batch.select(&s.test),
        dataset,
        montage,
    })
}

fn read_policy(path: &Path, n_classes: usize) -> Outcome<PolicySet> {
    let policy = PolicySet::from_json(&fs::read_to_string(path)?)?;
    if policy.n_classes() != n_classes {
        return Err(Failure::Runtime(format!(
            "policy {} covers {} classes but the dataset has {n_classes}",
            path.display(),
            policy.n_classes()
        )));
    }
    Ok(policy)
}

fn write_snapshots(out: &Path, snapshots: &[(String, PolicySet)]) -> Outcome {
    if snapshots.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(out.join("snapshots"))?;
    for (path, policy) in snapshots {
        fs::write(out.join(path), policy.to_json()?)?;
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Outcome<Value> {
    let spec = SyntheticSpec {
        n_times: a.n_times,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dataset = generate_synthetic(&spec, a.n, &RandomStream::new(cli.seed, 0).derive_named("synth"))?;
    let dir = a.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    let dtype = match a.dtype {
        DtypeArg::F64le => Dtype::F64,
        DtypeArg::F32le => Dtype::F32,
    };
    write_dataset(&dir, &dataset, dtype)?;
    Ok(json!({ "dataset": dir, "spec": serde_json::to_value(&spec).map_err(|e| Failure::Runtime(e.to_string()))? }))
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Outcome<Value> {
    let kind = parse_op(&a.op)?;
    let spec = AugOpSpec::new(kind, a.p, a.mu).map_err(|e| Failure::Usage(e.to_string()))?;
    let dataset = read_dataset(&a.input)?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(a.input.join("manifest.json"))?)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let montage = resolve_montage(a.montage.as_deref(), &dataset.channel_names)?;
    let mut rng = RandomStream::new(cli.seed, 0).derive_named("augment");
    let batch = augment_batch(&dataset.batch, &spec, montage.as_ref(), &mut rng)?;
    let out = Dataset { batch, ..dataset };
    write_dataset(&a.out, &out, manifest.dtype)?;
    Ok(json!({ "dataset": a.out }))
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome<Value> {
    let kinds = match (&a.op, a.all_ops) {
        (Some(name), _) => vec![parse_op(name)?],
        (None, true) => OpKind::differentiable_pool(),
        (None, false) => return Err(Failure::Usage("pass --all-ops or --op NAME".into())),
    };
    let montage = Montage::builtin();
    let ctx = AugContext::new(128.0, Some(&montage));
    let root = RandomStream::new(cli.seed, 0).derive_named("gradcheck");
    let shape = [2, montage.len(), 128];
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.to_vec(), root.derive_named("x").normals(n))?;
    let w = Tensor::new(shape.to_vec(), root.derive_named("w").normals(n))?;
    let mut rows = Vec::new();
    for (i, kind) in kinds.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let r = relaxation_gradcheck(*kind, &x, &w, a.p, a.mu, &ctx, &mut rng, a.step)?;
        rows.push((kind.name(), r.max_rel_error, r.passes(a.tolerance)));
    }
    match cli.format {
        Format::Csv => {
            println!("op,max_rel_error,pass");
            for (k, e, ok) in &rows {
                println!("{k},{e:e},{ok}");
            }
        }
        Format::Json => {
            let v: Vec<Value> = rows
                .iter()
                .map(|(k, e, ok)| json!({ "op": k, "max_rel_error": e, "pass": ok }))
                .collect();
            println!("{}", Value::Array(v));
        }
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.2).map(|r| r.0).collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(format!(
            "gradient check above {} for: {}",
            a.tolerance,
            failed.join(", ")
        )));
    }
    Ok(json!({ "checked": rows.len() }))
}

fn grid(space: &SpaceArgs, g: &GridArgs) -> Outcome<GridSpec> {
    let spec = GridSpec {
        n_probabilities: g.n_probabilities,
        n_magnitudes: g.n_magnitudes,
        pool: pool(space)?,
        n_subpolicies: space.n_subpolicies,
        n_stages: space.n_stages,
        class_wise: g.class_wise,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if g.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    Ok(spec)
}

fn finish_search(
    cli: &Cli,
    trace: &SearchTrace,
    snapshots: &[(String, PolicySet)],
    best: &PolicySet,
    valid: f64,
    test: f64,
) -> Outcome<Value> {
    fs::write(cli.out_dir.join("trace.csv"), trace.to_csv())?;
    fs::write(cli.out_dir.join("best_policy.json"), best.to_json()?)?;
    write_snapshots(&cli.out_dir, snapshots)?;
    for e in &trace.events {
        eprintln!("{e}");
    }
    print_summary(
        cli.format,
        &[("valid_balanced_accuracy", valid), ("test_balanced_accuracy", test)],
    );
    Ok(json!({
        "trace": "trace.csv",
        "best_policy": "best_policy.json",
        "valid_balanced_accuracy": valid,
        "test_balanced_accuracy": test,
        "events": trace.events,
    }))
}

fn search(cli: &Cli, a: &SearchArgs) -> Outcome<Value> {
    let mode = match a.mode {
        ModeArg::Adda => SearchMode::Adda,
        ModeArg::Cadda => SearchMode::Cadda,
        ModeArg::Dada => SearchMode::Dada,
        ModeArg::FasterAa => SearchMode::FasterAaBilevel,
        ModeArg::Random => return run_random(cli, &a.grid, &a.data, &a.train, &a.space),
        ModeArg::Density => return run_density(cli, &[], &a.grid, &a.data, &a.train, &a.space),
    };
    let cfg = SearchConfig {
        mode,
        xi_model: a.xi_model,
        xi_policy: a.xi_policy,
        epsilon: EpsilonRule::Scaled(a.epsilon_scale),
        epochs: a.budget,
        max_steps: a.max_steps,
        retrain_every: Some(if a.retrain_every == 0 { usize::MAX } else { a.retrain_every }),
        pool: pool(&a.space)?,
        n_subpolicies: a.space.n_subpolicies,
        n_stages: a.space.n_stages,
        batch_size: a.train.batch_size,
        train: train_config(&a.train)?,
        ..SearchConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load(&a.data, cli.seed)?;
    let rng = RandomStream::new(cli.seed, 0).derive_named("search");
    let result = run_gradient_search(&data.splits(), data.montage.as_ref(), &cfg, &rng)?;
    let valid = result
        .trace
        .retrains()
        .filter_map(|r| r.retrain_valid_balacc)
        .fold(f64::NEG_INFINITY, f64::max);
    let test = result
        .trace
        .retrains()
        .last()
        .and_then(|r| r.running_test_balacc)
        .unwrap_or(f64::NAN);
    let mut details = finish_search(cli, &result.trace, &result.snapshots, &result.best_policy, valid, test)?;
    fs::write(cli.out_dir.join("final_policy.json"), result.final_policy.to_json()?)?;
    details["final_policy"] = json!("final_policy.json");
    details["steps"] = json!(result.steps);
    details["halted"] = json!(result.halted);
    Ok(details)
}

fn grid_search(cli: &Cli, a: &GridSearchArgs) -> Outcome<Value> {
    run_random(cli, &a.grid, &a.data, &a.train, &a.space)
}

fn run_random(cli: &Cli, g: &GridArgs, d: &DataArgs, t: &TrainArgs, s: &SpaceArgs) -> Outcome<Value> {
    let spec = grid(s, g)?;
    let train = train_config(t)?;
    let data = load(d, cli.seed)?;
    let rng = RandomStream::new(cli.seed, 0).derive_named("random-search");
    let r = random_search(&spec, g.trials, &data.splits(), data.montage.as_ref(), &train, &rng)?;
    let (trace, snapshots) = r.trace();
    finish_search(cli, &trace, &snapshots, &r.best, r.best_valid_balacc, r.best_test_balacc)
}

fn density(cli: &Cli, a: &DensityArgs) -> Outcome<Value> {
    run_density(cli, &a.candidates, &a.grid, &a.data, &a.train, &a.space)
}

fn run_density(
    cli: &Cli,
    files: &[std::path::PathBuf],
    g: &GridArgs,
    d: &DataArgs,
    t: &TrainArgs,
    s: &SpaceArgs,
) -> Outcome<Value> {
    let train = train_config(t)?;
    let data = load(d, cli.seed)?;
    let splits = data.splits();
    let n_classes = splits.n_classes;
    let rng = RandomStream::new(cli.seed, 0).derive_named("density");
    let candidates: Vec<PolicySet> = if files.is_empty() {
        let spec = grid(s, g)?;
        let mut sampler = rng.derive_named("candidates");
        (0..g.trials)
            .map(|_| spec.sample(n_classes, &mut sampler))
            .collect::<augsearch::Result<_>>()?
    } else {
        files.iter().map(|f| read_policy(f, n_classes)).collect::<Outcome<_>>()?
    };
    let net = splits.network()?;
    let (_, params) = retrain(&splits, None, data.montage.as_ref(), &train, &rng.derive_named("pretrain"))?;
    let ranked = density_matching_search(
        &candidates,
        &net,
        &params,
        splits.valid,
        data.montage.as_ref(),
        &rng.derive_named("rank"),
    )?;
    let mut trace = SearchTrace::default();
    let mut snapshots = Vec::new();
    for (rank, r) in ranked.iter().enumerate() {
        let path = format!("snapshots/candidate_{:03}.json", r.index);
        trace.rows.push(TraceRow {
            step: rank,
            wall_time_s: 0.0,
            train_loss: None,
            valid_loss: Some(r.score),
            retrain_valid_balacc: None,
            running_test_balacc: None,
            policy_snapshot_path: Some(path.clone()),
        });
        snapshots.push((path, candidates[r.index].clone()));
    }
    let best = ranked
        .first()
        .map(|r| candidates[r.index].clone())
        .ok_or_else(|| Failure::Usage("no candidates to rank".into()))?;
    let (scores, _) = retrain(&splits, Some(&best), data.montage.as_ref(), &train, &rng.derive_named("retrain"))?;
    trace.rows.push(TraceRow {
        step: ranked.len(),
        wall_time_s: 0.0,
        train_loss: None,
        valid_loss: Some(scores.valid_loss),
        retrain_valid_balacc: Some(scores.valid_balanced_accuracy),
        running_test_balacc: Some(scores.test_balanced_accuracy),
        policy_snapshot_path: Some("best_policy.json".into()),
    });
    finish_search(
        cli,
        &trace,
        &snapshots,
        &best,
        scores.valid_balanced_accuracy,
        scores.test_balanced_accuracy,
    )
}

fn write_metrics(cli: &Cli, name: &str, report: &MetricsReport) -> Outcome<Value> {
    let per_class: Vec<Value> = report.per_class_f1.iter().map(|f| json!(f)).collect();
    let v = json!({
        "balanced_accuracy": report.balanced_accuracy,
        "macro_f1": report.macro_f1,
        "per_class_f1": per_class,
        "confusion": report.confusion,
        "absent_classes": report.absent_classes,
    });
    match cli.format {
        Format::Json => write_json(&cli.out_dir.join(format!("{name}.json")), &v)?,
        Format::Csv => {
            let mut text = String::from("metric,value\n");
            text += &format!("balanced_accuracy,{}\nmacro_f1,{}\n", report.balanced_accuracy, report.macro_f1);
            for (c, f) in report.per_class_f1.iter().enumerate() {
                text += &format!("f1_class_{c},{}\n", f.map(|x| x.to_string()).unwrap_or_default());
            }
            fs::write(cli.out_dir.join(format!("{name}.csv")), text)?;
        }
    }
    Ok(v)
}

fn retrain_cmd(cli: &Cli, a: &RetrainArgs) -> Outcome<Value> {
    let train = train_config(&a.train)?;
    let data = load(&a.data, cli.seed)?;
    let splits = data.splits();
    let policy = a.policy.as_deref().map(|p| read_policy(p, splits.n_classes)).transpose()?;
    let rng = RandomStream::new(cli.seed, 0).derive_named("retrain");
    let (scores, params) = retrain(&splits, policy.as_ref(), data.montage.as_ref(), &train, &rng)?;
    let net = splits.network()?;
    let ckpt = cli.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &net, &params)?;
    let report = net.evaluate(&params, splits.test)?;
    let metrics = write_metrics(cli, "metrics", &report)?;
    print_summary(
        cli.format,
        &[
            ("valid_balanced_accuracy", scores.valid_balanced_accuracy),
            ("test_balanced_accuracy", scores.test_balanced_accuracy),
        ],
    );
    Ok(json!({ "checkpoint": "model.ckpt", "test_metrics": metrics, "valid_balanced_accuracy": scores.valid_balanced_accuracy }))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome<Value> {
    let (net, params) = load_checkpoint(&a.checkpoint)?;
    let data = load(&a.data, cli.seed)?;
    let batch = match a.split {
        SplitArg::All => &data.dataset.batch,
        SplitArg::Train => &data.train,
        SplitArg::Valid => &data.valid,
        SplitArg::Test => &data.test,
    };
    let report = net.evaluate(&params, batch)?;
    let metrics = write_metrics(cli, "eval", &report)?;
    print_summary(
        cli.format,
        &[("balanced_accuracy", report.balanced_accuracy), ("macro_f1", report.macro_f1)],
    );
    Ok(json!({ "metrics": metrics }))
}

fn space_size(cli: &Cli, a: &SpaceSizeArgs) -> Outcome<Value> {
    let n = policy_space_size(
        a.n_probabilities,
        a.n_magnitudes,
        a.n_ops,
        a.n_subpolicies,
        a.n_stages,
        a.classes,
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.format {
        Format::Csv => println!("{n}"),
        Format::Json => println!("{}", json!({ "space_size": n.to_string() })),
    }
    Ok(json!({ "space_size": n.to_string() }))
}
