//! Policy search: the alternating bilevel (C)ADDA loop with its
//! finite-difference hypergradient, plus random search and density matching.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::augment::{AugContext, AugOpSpec, Montage, OpKind, SignalBatch};
use crate::autodiff::Tape;
use crate::estimators::{relax_with_critic, Critic, RelaxConfig, GUMBEL_TEMPERATURE};
use crate::model::{fit, nll, Adam, ChambonNet, ChambonNetConfig, Params, TrainConfig, TrainStreams};
use crate::policy::{
    apply_bound, apply_policy, ApplyMode, Architecture, ChoiceRecord, Policy, PolicyBinding,
    PolicySet, Site,
};
use crate::rng::RandomStream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Adda,
    Cadda,
    Dada,
    FasterAaBilevel,
}

impl SearchMode {
    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Adda => "adda",
            SearchMode::Cadda => "cadda",
            SearchMode::Dada => "dada",
            SearchMode::FasterAaBilevel => "faster_aa_bilevel",
        }
    }

    fn architecture(self) -> Architecture {
        match self {
            SearchMode::Adda | SearchMode::Cadda => Architecture::Adda,
            SearchMode::Dada => Architecture::Dada,
            SearchMode::FasterAaBilevel => Architecture::FasterAa,
        }
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adda" => Ok(SearchMode::Adda),
            "cadda" => Ok(SearchMode::Cadda),
            "dada" => Ok(SearchMode::Dada),
            "faster_aa_bilevel" | "faster-aa" | "faster_aa" => Ok(SearchMode::FasterAaBilevel),
            other => Err(Error::parse("mode", format!("unknown search mode '{other}'"))),
        }
    }
}

/// Finite-difference step for the Hessian-vector product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonRule {
    /// `scale / |g'|`.
    Scaled(f64),
    Fixed(f64),
}

impl EpsilonRule {
    pub fn epsilon(self, direction_norm: f64) -> f64 {
        match self {
            EpsilonRule::Scaled(s) => s / direction_norm,
            EpsilonRule::Fixed(e) => e,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Step of the unrolled model.
    pub xi_model: f64,
    /// Step of the policy parameters.
    pub xi_policy: f64,
    pub epsilon: EpsilonRule,
    /// Search epochs over the training split.
    pub epochs: usize,
    /// Optional cap on search steps.
    pub max_steps: Option<usize>,
    /// Retrain from scratch every this many search epochs (and at the end);
    /// `None` disables retraining.
    pub retrain_every: Option<usize>,
    pub pool: Vec<OpKind>,
    pub n_subpolicies: usize,
    pub n_stages: usize,
    /// Doubled for class-wise search with more than one class.
    pub batch_size: usize,
    /// Adam settings of the search model; also used for retraining.
    pub train: TrainConfig,
    pub relax: RelaxConfig,
    /// Halt when the search model's validation loss exceeds this multiple of
    /// its initial value at `divergence_patience` consecutive retrains.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Adda,
            xi_model: 1e-3,
            xi_policy: 5e4,
            epsilon: EpsilonRule::Scaled(0.01),
            epochs: 10,
            max_steps: None,
            retrain_every: Some(2),
            pool: OpKind::differentiable_pool(),
            n_subpolicies: 5,
            n_stages: 2,
            batch_size: 16,
            train: TrainConfig::default(),
            relax: RelaxConfig::default(),
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_model > 0.0) || !(self.xi_policy >= 0.0) {
            return Err(Error::invalid("search config", "step sizes must be positive"));
        }
        let e = match self.epsilon {
            EpsilonRule::Scaled(e) | EpsilonRule::Fixed(e) => e,
        };
        if !(e > 0.0) {
            return Err(Error::invalid("search config", "finite-difference step must be positive"));
        }
        if self.batch_size == 0 || self.n_subpolicies == 0 || self.n_stages == 0 || self.pool.is_empty() {
            return Err(Error::invalid("search config", "batch size, L, K and the pool must be non-empty"));
        }
        if self.retrain_every == Some(0) {
            return Err(Error::invalid("search config", "retrain interval must be at least one epoch"));
        }
        self.train.validate()
    }

    pub fn effective_batch_size(&self, n_classes: usize) -> usize {
        if self.mode == SearchMode::Cadda && n_classes > 1 {
            2 * self.batch_size
        } else {
            self.batch_size
        }
    }

    /// The relaxed starting policy.
    pub fn initial_policy(&self, n_classes: usize) -> Result<PolicySet> {
        let p = Policy::initial(self.mode.architecture(), &self.pool, self.n_subpolicies, self.n_stages)?;
        Ok(match self.mode {
            SearchMode::Cadda => PolicySet::class_wise(vec![p; n_classes]),
            _ => PolicySet::shared(p, n_classes),
        })
    }
}

/// Disjoint train / validation / test windows.
#[derive(Clone, Copy, Debug)]
pub struct DataSplits<'a> {
    pub train: &'a SignalBatch,
    pub valid: &'a SignalBatch,
    pub test: &'a SignalBatch,
    pub n_classes: usize,
}

impl DataSplits<'_> {
    fn validate(&self) -> Result<()> {
        for (name, b) in [("train", self.train), ("valid", self.valid), ("test", self.test)] {
            b.validate()?;
            if b.n_examples() == 0 {
                return Err(Error::contract(format!("{name} split is empty")));
            }
            if let Some(y) = b.labels.iter().find(|&&y| y >= self.n_classes) {
                return Err(Error::contract(format!("{name} label {y} outside {} classes", self.n_classes)));
            }
        }
        let shape = |b: &SignalBatch| (b.n_channels(), b.n_times());
        if shape(self.train) != shape(self.valid) || shape(self.train) != shape(self.test) {
            return Err(Error::contract("splits disagree in channels or window length"));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<ChambonNet> {
        ChambonNet::new(ChambonNetConfig::new(
            self.train.n_channels(),
            self.train.n_times(),
            self.n_classes.max(2),
        ))
    }
}

/// `-xi (grad_alpha(theta + eps d) - grad_alpha(theta - eps d)) / (2 eps)`:
/// the finite-difference form of `-xi H_{alpha theta} d`, which is the
/// gradient of the validation loss at the unrolled model when `d` is that
/// loss's gradient.
pub fn finite_difference_hypergradient<F>(
    theta: &Params,
    direction: &Params,
    epsilon: f64,
    xi_model: f64,
    mut grad_alpha: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&Params) -> Result<Vec<f64>>,
{
    let mut plus = theta.clone();
    plus.axpy(epsilon, direction);
    let mut minus = theta.clone();
    minus.axpy(-epsilon, direction);
    let gp = grad_alpha(&plus)?;
    let gm = grad_alpha(&minus)?;
    if gp.len() != gm.len() {
        return Err(Error::contract("policy gradients differ in length"));
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| -xi_model * (a - b) / (2.0 * epsilon))
        .collect())
}

/// Everything the alternating loop updates.
pub struct HyperGradState {
    pub theta: Params,
    pub alpha: PolicySet,
    pub adam: Adam,
    /// RELAX critics, one per categorical site, created on first use.
    critics: Vec<Option<Critic>>,
    critic_rng: RandomStream,
}

impl HyperGradState {
    pub fn new(theta: Params, alpha: PolicySet, train: &TrainConfig, critic_rng: RandomStream) -> Self {
        Self {
            adam: Adam::new(&theta, train),
            theta,
            alpha,
            critics: Vec::new(),
            critic_rng,
        }
    }

    fn critic(&mut self, site: usize, len: usize, relax: &RelaxConfig) -> &mut Critic {
        if self.critics.len() <= site {
            self.critics.resize_with(site + 1, || None);
        }
        let rng = &self.critic_rng;
        self.critics[site].get_or_insert_with(|| {
            Critic::new(len, relax.critic_width, relax.critic_lr, &mut rng.derive(site as u64))
        })
    }
}

struct AugEval {
    loss: f64,
    theta_grad: Option<Params>,
    alpha_grad: Option<Vec<f64>>,
    choices: Vec<ChoiceRecord>,
    sites: Vec<Site>,
}

/// Training loss under the relaxed policy, with gradients as requested.
#[allow(clippy::too_many_arguments)]
fn augmented_loss(
    net: &ChambonNet,
    theta: &Params,
    alpha: &PolicySet,
    batch: &SignalBatch,
    montage: Option<&Montage>,
    mut rng: RandomStream,
    want_theta: bool,
    want_alpha: bool,
) -> Result<AugEval> {
    let tape = Tape::new();
    let binding = PolicyBinding::new(alpha, &tape, want_alpha);
    let vars = theta.bind(&tape, want_theta);
    let ctx = AugContext::new(batch.sfreq, montage);
    let x = tape.constant(batch.data.clone());
    let applied = apply_bound(alpha, &binding, x, &batch.labels, ApplyMode::Relaxed, &ctx, &mut rng)?;
    let loss = nll(net.forward(&vars, applied.out, None)?, &batch.labels)?;
    let mut eval = AugEval {
        loss: loss.item(),
        theta_grad: None,
        alpha_grad: None,
        choices: applied.choices,
        sites: binding.sites().to_vec(),
    };
    if !eval.loss.is_finite() {
        return Err(Error::NonFinite(format!("augmented training loss {}", eval.loss)));
    }
    if want_theta || want_alpha {
        let grads = tape.backward(loss)?;
        if want_theta {
            eval.theta_grad = Some(Params {
                tensors: vars.iter().map(|v| grads.wrt(*v)).collect(),
            });
        }
        if want_alpha {
            eval.alpha_grad = Some(binding.gradient(&grads)?);
        }
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Loss of the augmented batch used for the model update.
    pub train_loss: f64,
    /// Validation-batch loss at the unrolled model.
    pub valid_loss: f64,
    pub epsilon: Option<f64>,
    /// `None` when the policy update was skipped.
    pub alpha_grad: Option<Vec<f64>>,
    pub event: Option<String>,
}

/// Policy hypergradient at the current state, without updating anything
/// except the RELAX critics. Returns the gradient (or `None` when the step
/// underflows), the validation loss at the unrolled model and the step used.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient(
    state: &mut HyperGradState,
    net: &ChambonNet,
    train: &SignalBatch,
    valid: &SignalBatch,
    cfg: &SearchConfig,
    montage: Option<&Montage>,
    noise: &RandomStream,
) -> Result<(Option<Vec<f64>>, f64, f64)> {
    // unrolled model, same augmentation noise as the perturbed evaluations
    let e0 = augmented_loss(net, &state.theta, &state.alpha, train, montage, noise.clone(), true, false)?;
    let mut unrolled = state.theta.clone();
    unrolled.axpy(-cfg.xi_model, e0.theta_grad.as_ref().expect("requested"));
    let (valid_loss, g_valid) = net.loss_and_grad(&unrolled, &valid.data, &valid.labels, None)?;
    let norm = g_valid.norm();
    let epsilon = cfg.epsilon.epsilon(norm);
    if !(norm > 1e-12) || !(epsilon.is_finite() && epsilon > 0.0) || !valid_loss.is_finite() {
        return Ok((None, valid_loss, epsilon));
    }
    let mut evaluations: Vec<(f64, Vec<ChoiceRecord>, Vec<Site>)> = Vec::new();
    let relax = cfg.relax.clone();
    let grad = {
        let state_ref = &mut *state;
        finite_difference_hypergradient(&state_ref.theta.clone(), &g_valid, epsilon, cfg.xi_model, |theta| {
            let e = augmented_loss(net, theta, &state_ref.alpha, train, montage, noise.clone(), false, true)?;
            let mut g = e.alpha_grad.expect("requested");
            for ch in e.choices.iter().filter(|ch| !e.sites[ch.site].inert) {
                let site = e.sites[ch.site];
                let critic = state_ref.critic(ch.site, site.len, &relax);
                let rg = relax_with_critic(&ch.weights, &ch.noise, e.loss, critic, GUMBEL_TEMPERATURE, false)?;
                for (d, v) in g[site.offset..site.offset + site.len].iter_mut().zip(rg) {
                    *d += v;
                }
            }
            evaluations.push((e.loss, e.choices, e.sites));
            Ok(g)
        })?
    };
    // critics take their variance step only after both evaluations used them
    if let Some((loss, choices, sites)) = evaluations.first() {
        for ch in choices.iter().filter(|ch| !sites[ch.site].inert) {
            let critic = state.critic(ch.site, sites[ch.site].len, &relax);
            relax_with_critic(&ch.weights, &ch.noise, *loss, critic, GUMBEL_TEMPERATURE, true)?;
        }
    }
    Ok((Some(grad), valid_loss, epsilon))
}

/// One iteration of the alternating loop: hypergradient, projected policy
/// step, then an Adam step of the model on a freshly augmented batch.
#[allow(clippy::too_many_arguments)]
pub fn adda_step(
    state: &mut HyperGradState,
    net: &ChambonNet,
    train: &SignalBatch,
    valid: &SignalBatch,
    cfg: &SearchConfig,
    montage: Option<&Montage>,
    noise: &RandomStream,
    streams: &mut TrainStreams,
) -> Result<StepReport> {
    let (grad, valid_loss, epsilon) = hypergradient(state, net, train, valid, cfg, montage, noise)?;
    let mut event = None;
    match &grad {
        Some(g) => {
            if cfg.xi_policy > 0.0 {
                let mut params = state.alpha.params();
                for (a, d) in params.iter_mut().zip(g) {
                    *a -= cfg.xi_policy * d;
                }
                state.alpha.set_params(&params)?;
                state.alpha.project();
            }
        }
        None => {
            event = Some(format!("policy update skipped: finite-difference step {epsilon} unusable"));
        }
    }
    let batch = apply_policy(&state.alpha, train, montage, &mut streams.augment)?;
    let (train_loss, g) = net.loss_and_grad(&state.theta, &batch.data, &batch.labels, Some(&mut streams.dropout))?;
    if !train_loss.is_finite() || !g.is_finite() {
        return Err(Error::Diverged(format!(
            "training loss {train_loss}, parameter norm {}",
            state.theta.norm()
        )));
    }
    state.adam.step(&mut state.theta, &g);
    Ok(StepReport {
        train_loss,
        valid_loss,
        epsilon: grad.as_ref().map(|_| epsilon),
        alpha_grad: grad,
        event,
    })
}

pub const TRACE_HEADER: &str =
    "step,wall_time_s,train_loss,valid_loss,retrain_valid_balacc,running_test_balacc,policy_snapshot_path";

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub wall_time_s: f64,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
    pub retrain_valid_balacc: Option<f64>,
    pub running_test_balacc: Option<f64>,
    pub policy_snapshot_path: Option<String>,
}

impl TraceRow {
    pub fn is_retrain(&self) -> bool {
        self.retrain_valid_balacc.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
    /// Skipped updates, divergence and similar notes.
    pub events: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SearchTrace {
    pub fn retrains(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.is_retrain())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{},{},{}",
                r.step,
                r.wall_time_s,
                opt(r.train_loss),
                opt(r.valid_loss),
                opt(r.retrain_valid_balacc),
                opt(r.running_test_balacc),
                r.policy_snapshot_path.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// Drops the wall-time column from a trace CSV, leaving the reproducible part.
pub fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            if cols.len() > 1 {
                cols.remove(1);
            }
            cols.join(",") + "\n"
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrained {
    pub valid_balanced_accuracy: f64,
    pub test_balanced_accuracy: f64,
    pub valid_loss: f64,
}

/// Trains a fresh model under a (discrete) policy and scores it.
pub fn retrain(
    splits: &DataSplits<'_>,
    policy: Option<&PolicySet>,
    montage: Option<&Montage>,
    train: &TrainConfig,
    rng: &RandomStream,
) -> Result<(Retrained, Params)> {
    let net = splits.network()?;
    let init = net.init(&mut rng.derive_named("init"));
    let fitted = fit(&net, init, splits.train, splits.valid, policy, montage, train, rng)?;
    let valid = net.evaluate(&fitted.params, splits.valid)?;
    let test = net.evaluate(&fitted.params, splits.test)?;
    Ok((
        Retrained {
            valid_balanced_accuracy: valid.balanced_accuracy,
            test_balanced_accuracy: test.balanced_accuracy,
            valid_loss: net.loss(&fitted.params, splits.valid)?,
        },
        fitted.params,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub trace: SearchTrace,
    /// Relaxed policy at the end of the search.
    pub final_policy: PolicySet,
    /// Discretized policy of the best-validation retrain, or of the final
    /// policy when retraining is disabled.
    pub best_policy: PolicySet,
    /// Discretized snapshots, keyed by the path written into the trace.
    pub snapshots: Vec<(String, PolicySet)>,
    pub steps: usize,
    pub halted: bool,
}

struct Retrainer {
    best_valid: f64,
    running_test: Option<f64>,
    best_policy: Option<PolicySet>,
    diverged_count: usize,
    initial_valid_loss: f64,
    count: usize,
}

/// Runs the alternating search over the training split.
pub fn run_gradient_search(
    splits: &DataSplits<'_>,
    montage: Option<&Montage>,
    cfg: &SearchConfig,
    rng: &RandomStream,
) -> Result<SearchResult> {
    cfg.validate()?;
    splits.validate()?;
    let start = Instant::now();
    let net = splits.network()?;
    let theta0 = net.init(&mut rng.derive_named("init"));
    let alpha0 = cfg.initial_policy(splits.n_classes)?;
    let mut state = HyperGradState::new(theta0, alpha0, &cfg.train, rng.derive_named("critic"));
    let mut streams = TrainStreams::from(&rng.derive_named("model"));
    let mut order_rng = rng.derive_named("search.order");
    let mut valid_rng = rng.derive_named("search.valid");
    let hyper_rng = rng.derive_named("hyper");
    let batch_size = cfg.effective_batch_size(splits.n_classes);

    let mut trace = SearchTrace::default();
    let mut snapshots = Vec::new();
    let mut rt = Retrainer {
        best_valid: f64::NEG_INFINITY,
        running_test: None,
        best_policy: None,
        diverged_count: 0,
        initial_valid_loss: net.loss(&state.theta, splits.valid)?,
        count: 0,
    };
    let mut halted = false;
    let mut step = 0usize;
    let mut retrained_at = None;

    let do_retrain = |state: &HyperGradState,
                      step: usize,
                      rt: &mut Retrainer,
                      trace: &mut SearchTrace,
                      snapshots: &mut Vec<(String, PolicySet)>|
     -> Result<bool> {
        let policy = state.alpha.discretize();
        let (scores, _) = retrain(
            splits,
            Some(&policy),
            montage,
            &cfg.train,
            &rng.derive_named("retrain").derive(rt.count as u64),
        )?;
        let path = format!("snapshots/retrain_{:03}.json", rt.count);
        rt.count += 1;
        if scores.valid_balanced_accuracy > rt.best_valid {
            rt.best_valid = scores.valid_balanced_accuracy;
            rt.running_test = Some(scores.test_balanced_accuracy);
            rt.best_policy = Some(policy.clone());
        }
        let search_valid = net.loss(&state.theta, splits.valid)?;
        trace.rows.push(TraceRow {
            step,
            wall_time_s: start.elapsed().as_secs_f64(),
            train_loss: None,
            valid_loss: Some(search_valid),
            retrain_valid_balacc: Some(scores.valid_balanced_accuracy),
            running_test_balacc: rt.running_test,
            policy_snapshot_path: Some(path.clone()),
        });
        snapshots.push((path, policy));
        if search_valid > cfg.divergence_factor * rt.initial_valid_loss {
            rt.diverged_count += 1;
        } else {
            rt.diverged_count = 0;
        }
        if rt.diverged_count >= cfg.divergence_patience {
            trace.events.push(format!(
                "halted at step {step}: validation loss {search_valid} above {}x the initial {} at {} consecutive retrains",
                cfg.divergence_factor, rt.initial_valid_loss, rt.diverged_count
            ));
            return Ok(true);
        }
        Ok(false)
    };

    let n_train = splits.train.n_examples();
    let mut valid_order: Vec<usize> = Vec::new();
    let mut valid_pos = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order_rng.shuffle(&mut order);
        for idx in order.chunks(batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut vidx = Vec::with_capacity(batch_size);
            while vidx.len() < batch_size.min(splits.valid.n_examples()) {
                if valid_pos == valid_order.len() {
                    valid_order = (0..splits.valid.n_examples()).collect();
                    valid_rng.shuffle(&mut valid_order);
                    valid_pos = 0;
                }
                vidx.push(valid_order[valid_pos]);
                valid_pos += 1;
            }
            let tb = splits.train.select(idx);
            let vb = splits.valid.select(&vidx);
            let report = adda_step(
                &mut state,
                &net,
                &tb,
                &vb,
                cfg,
                montage,
                &hyper_rng.derive(step as u64),
                &mut streams,
            )?;
            if let Some(e) = report.event {
                trace.events.push(format!("step {step}: {e}"));
            }
            trace.rows.push(TraceRow {
                step,
                wall_time_s: start.elapsed().as_secs_f64(),
                train_loss: Some(report.train_loss),
                valid_loss: Some(report.valid_loss),
                retrain_valid_balacc: None,
                running_test_balacc: None,
                policy_snapshot_path: None,
            });
            step += 1;
        }
        if let Some(k) = cfg.retrain_every {
            if (epoch + 1) % k == 0 {
                retrained_at = Some(step);
                if do_retrain(&state, step, &mut rt, &mut trace, &mut snapshots)? {
                    halted = true;
                    break;
                }
            }
        }
    }
    if cfg.retrain_every.is_some() && !halted && retrained_at != Some(step) {
        do_retrain(&state, step, &mut rt, &mut trace, &mut snapshots)?;
    }
    let best_policy = rt.best_policy.unwrap_or_else(|| state.alpha.discretize());
    Ok(SearchResult {
        trace,
        final_policy: state.alpha,
        best_policy,
        snapshots,
        steps: step,
        halted,
    })
}

/// Discrete grid for random search.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub n_probabilities: usize,
    pub n_magnitudes: usize,
    pub pool: Vec<OpKind>,
    pub n_subpolicies: usize,
    pub n_stages: usize,
    pub class_wise: bool,
}

impl GridSpec {
    /// Evenly spaced over `[0, 1]`, so `p = 0` (no augmentation) is on the grid.
    pub fn probabilities(&self) -> Vec<f64> {
        match self.n_probabilities {
            0 => Vec::new(),
            1 => vec![0.5],
            n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        }
    }

    /// Cell midpoints of `[0, 1]`.
    pub fn magnitudes(&self) -> Vec<f64> {
        let n = self.n_magnitudes;
        (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pool.is_empty() && (self.n_probabilities == 0 || self.n_magnitudes == 0) {
            return Err(Error::invalid("grid", "need at least one probability and magnitude value"));
        }
        if self.n_subpolicies == 0 || self.n_stages == 0 {
            return Err(Error::invalid("grid", "need L >= 1 and K >= 1"));
        }
        Ok(())
    }

    /// A uniform draw from the grid; the identity policy when the pool is empty.
    pub fn sample(&self, n_classes: usize, rng: &mut RandomStream) -> Result<PolicySet> {
        if self.pool.is_empty() {
            return Ok(PolicySet::identity(n_classes));
        }
        let (ps, mus) = (self.probabilities(), self.magnitudes());
        let draw = |rng: &mut RandomStream| -> Result<Policy> {
            let mut subs = Vec::with_capacity(self.n_subpolicies);
            for _ in 0..self.n_subpolicies {
                let mut chain = Vec::with_capacity(self.n_stages);
                for _ in 0..self.n_stages {
                    let kind = self.pool[rng.below(self.pool.len())];
                    let p = ps[rng.below(ps.len())];
                    let mu = mus[rng.below(mus.len())];
                    chain.push(AugOpSpec::new(kind, p, if kind.has_magnitude() { mu } else { 0.0 })?);
                }
                subs.push(chain);
            }
            Ok(Policy::from_specs(&subs))
        };
        Ok(if self.class_wise {
            PolicySet::class_wise((0..n_classes).map(|_| draw(rng)).collect::<Result<_>>()?)
        } else {
            PolicySet::shared(draw(rng)?, n_classes)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub wall_time_s: f64,
    pub valid_balacc: f64,
    pub test_balacc: f64,
    /// Test accuracy of the best-validation trial so far.
    pub running_test_balacc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomSearchResult {
    pub best: PolicySet,
    pub best_valid_balacc: f64,
    pub best_test_balacc: f64,
    pub trials: Vec<TrialRow>,
    /// Sampled policy of each trial.
    pub candidates: Vec<PolicySet>,
}

impl RandomSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,valid_balacc,test_balacc,running_test_balacc\n");
        for t in &self.trials {
            let _ = writeln!(out, "{},{},{},{}", t.trial, t.valid_balacc, t.test_balacc, t.running_test_balacc);
        }
        out
    }

    /// The trials in the common trace schema, one retrain row per trial,
    /// with the snapshot each row points to.
    pub fn trace(&self) -> (SearchTrace, Vec<(String, PolicySet)>) {
        let mut trace = SearchTrace::default();
        let mut snapshots = Vec::with_capacity(self.trials.len());
        for (t, policy) in self.trials.iter().zip(&self.candidates) {
            let path = format!("snapshots/trial_{:03}.json", t.trial);
            trace.rows.push(TraceRow {
                step: t.trial,
                wall_time_s: t.wall_time_s,
                train_loss: None,
                valid_loss: None,
                retrain_valid_balacc: Some(t.valid_balacc),
                running_test_balacc: Some(t.running_test_balacc),
                policy_snapshot_path: Some(path.clone()),
            });
            snapshots.push((path, policy.clone()));
        }
        (trace, snapshots)
    }
}

/// Samples `trials` grid policies, trains each from scratch and keeps the
/// best by validation balanced accuracy (first one on ties). Every trial
/// shares the initialization and training streams.
pub fn random_search(
    grid: &GridSpec,
    trials: usize,
    splits: &DataSplits<'_>,
    montage: Option<&Montage>,
    train: &TrainConfig,
    rng: &RandomStream,
) -> Result<RandomSearchResult> {
    grid.validate()?;
    splits.validate()?;
    if trials == 0 {
        return Err(Error::invalid("random search", "need at least one trial"));
    }
    let mut sampler = rng.derive_named("candidates");
    let train_rng = rng.derive_named("train");
    let start = Instant::now();
    let mut best: Option<(PolicySet, f64, f64)> = None;
    let mut rows = Vec::with_capacity(trials);
    let mut candidates = Vec::with_capacity(trials);
    for trial in 0..trials {
        let candidate = grid.sample(splits.n_classes, &mut sampler)?;
        let (scores, _) = retrain(splits, Some(&candidate), montage, train, &train_rng)?;
        if best.as_ref().is_none_or(|b| scores.valid_balanced_accuracy > b.1) {
            best = Some((candidate.clone(), scores.valid_balanced_accuracy, scores.test_balanced_accuracy));
        }
        candidates.push(candidate);
        let b = best.as_ref().expect("set above");
        rows.push(TrialRow {
            trial,
            wall_time_s: start.elapsed().as_secs_f64(),
            valid_balacc: scores.valid_balanced_accuracy,
            test_balacc: scores.test_balanced_accuracy,
            running_test_balacc: b.2,
        });
    }
    let (best, v, t) = best.expect("at least one trial");
    Ok(RandomSearchResult {
        best,
        best_valid_balacc: v,
        best_test_balacc: t,
        trials: rows,
        candidates,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    /// Loss of the pre-trained model on the augmented validation split.
    pub score: f64,
}

/// Scores candidates by a pre-trained model's loss on the augmented
/// validation split, ascending (ties keep input order). Every candidate sees
/// the same augmentation stream.
pub fn density_matching_search(
    candidates: &[PolicySet],
    net: &ChambonNet,
    params: &Params,
    valid: &SignalBatch,
    montage: Option<&Montage>,
    rng: &RandomStream,
) -> Result<Vec<Ranked>> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for (index, cand) in candidates.iter().enumerate() {
        let mut stream = rng.clone();
        let augmented = apply_policy(cand, valid, montage, &mut stream)?;
        ranked.push(Ranked {
            index,
            score: net.loss(params, &augmented)?,
        });
    }
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// Mean forward time of one relaxed stage, for comparing architectures.
pub fn stage_forward_seconds(
    stage_mode: crate::policy::StageMode,
    pool: &[OpKind],
    batch: &SignalBatch,
    montage: Option<&Montage>,
    repeats: usize,
    rng: &RandomStream,
) -> Result<f64> {
    let stage = crate::policy::Stage::uniform(pool)?;
    let ctx = AugContext::new(batch.sfreq, montage);
    let mut stream = rng.clone();
    let start = Instant::now();
    for _ in 0..repeats {
        let tape = Tape::new();
        let vars = crate::policy::StageVars::bind(&stage, &tape, true, 0);
        let x = tape.constant(batch.data.clone());
        crate::policy::stage_forward(&stage, &vars, x, ApplyMode::Relaxed, stage_mode, &ctx, &mut stream)?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats.max(1) as f64)
}

#[cfg(test)]
mod tests;
