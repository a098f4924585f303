//! The small sleep-staging CNN, its Adam trainer with early stopping, and
//! classification metrics.
//!
//! Layers (for `C` channels and `T` samples):
//!
//! | layer | operation | parameters |
//! |---|---|---|
//! | 3 | spatial `C x C` linear map | `C * C` |
//! | 5 | 8 temporal filters of length 64, ReLU | `8 * 64 + 8` |
//! | 6 | max pool 16 | |
//! | 7 | 8 -> 8 temporal filters of length 64, ReLU | `8 * 8 * 64 + 8` |
//! | 8 | max pool 16 | |
//! | 10 | dropout 50% | |
//! | 11 | dense to classes, log-softmax | `n_classes * (C * (T // 256) * 8)` |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::augment::{Montage, SignalBatch};
use crate::autodiff::{Tape, Tensor, Var};
use crate::policy::{apply_policy, PolicySet};
use crate::rng::RandomStream;
use crate::{Error, Result};

pub const N_FILTERS: usize = 8;
pub const KERNEL: usize = 64;
pub const POOL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChambonNetConfig {
    pub n_channels: usize,
    pub n_times: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl ChambonNetConfig {
    pub fn new(n_channels: usize, n_times: usize, n_classes: usize) -> Self {
        Self {
            n_channels,
            n_times,
            n_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_classes < 2 {
            return Err(Error::contract("need at least one channel and two classes"));
        }
        if self.n_times / (POOL * POOL) < 2 {
            return Err(Error::contract(format!(
                "window of {} samples is too short: need T // 256 >= 2",
                self.n_times
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Length of the flattened feature vector.
    pub fn n_features(&self) -> usize {
        self.n_channels * (self.n_times / (POOL * POOL)) * N_FILTERS
    }
}

/// Model parameters in the order of [`ChambonNet::param_specs`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChambonNet {
    pub cfg: ChambonNetConfig,
}

impl ChambonNet {
    pub fn new(cfg: ChambonNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Parameter names (by layer number) and shapes.
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.cfg.n_channels;
        vec![
            ("layer3.spatial.weight", vec![c, c]),
            ("layer5.conv.weight", vec![N_FILTERS, 1, KERNEL]),
            ("layer5.conv.bias", vec![N_FILTERS]),
            ("layer7.conv.weight", vec![N_FILTERS, N_FILTERS, KERNEL]),
            ("layer7.conv.bias", vec![N_FILTERS]),
            ("layer11.dense.weight", vec![self.cfg.n_classes, self.cfg.n_features()]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Uniform in `+-1/sqrt(fan_in)` per layer.
    pub fn init(&self, rng: &mut RandomStream) -> Params {
        let c = self.cfg.n_channels;
        let fan_in = [c, KERNEL, KERNEL, N_FILTERS * KERNEL, N_FILTERS * KERNEL, self.cfg.n_features()];
        let tensors = self
            .param_specs()
            .into_iter()
            .zip(fan_in)
            .map(|((_, shape), fan)| {
                let n: usize = shape.iter().product();
                let bound = 1.0 / (fan as f64).sqrt();
                let data = (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Params { tensors }
    }

    /// Log-probabilities `[B, n_classes]` for `x` of shape `[B, C, T]`.
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>, dropout_rng: Option<&mut RandomStream>) -> Result<Var<'t>> {
        let s = x.shape();
        let (c, t) = (self.cfg.n_channels, self.cfg.n_times);
        if s.len() != 3 || s[1] != c || s[2] != t {
            return Err(Error::contract(format!("network expects [B, {c}, {t}], got {s:?}")));
        }
        if params.len() != 6 {
            return Err(Error::contract("network needs six parameter tensors"));
        }
        let b = s[0];
        let tape = x.tape();
        let pad = (KERNEL / 2 - 1, KERNEL / 2);
        let h = x.mix_channels(params[0]).reshape(&[b * c, 1, t]);
        let h = bias_relu_pool(h.conv1d(params[1], pad.0, pad.1), params[2], POOL);
        let h = bias_relu_pool(h.conv1d(params[3], pad.0, pad.1), params[4], POOL);
        let f = self.cfg.n_features();
        let mut h = h.reshape(&[b, f]);
        if let Some(rng) = dropout_rng {
            let keep = 1.0 - self.cfg.dropout;
            let mask: Vec<f64> = (0..b * f)
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            h = h.mul(tape.constant(Tensor::from_parts(vec![b, f], mask)));
        }
        let logits = h.matmul(transpose(params[5]));
        Ok(logits.log_softmax())
    }

    /// Mean cross-entropy and its gradient.
    pub fn loss_and_grad(
        &self,
        params: &Params,
        x: &Tensor,
        labels: &[usize],
        dropout_rng: Option<&mut RandomStream>,
    ) -> Result<(f64, Params)> {
        let tape = Tape::new();
        let vars = params.bind(&tape, true);
        let logp = self.forward(&vars, tape.constant(x.clone()), dropout_rng)?;
        let loss = nll(logp, labels)?;
        let grads = tape.backward(loss)?;
        let tensors = vars.iter().map(|v| grads.wrt(*v)).collect();
        Ok((loss.item(), Params { tensors }))
    }

    /// Mean cross-entropy without dropout, evaluated in chunks.
    pub fn loss(&self, params: &Params, data: &SignalBatch) -> Result<f64> {
        let mut total = 0.0;
        for chunk in chunks(data.n_examples(), 64) {
            let part = data.select(&chunk);
            let tape = Tape::new();
            let vars = params.bind(&tape, false);
            let logp = self.forward(&vars, tape.constant(part.data), None)?;
            total += nll(logp, &part.labels)?.item() * chunk.len() as f64;
        }
        Ok(total / data.n_examples() as f64)
    }

    pub fn predict(&self, params: &Params, x: &Tensor) -> Result<Vec<usize>> {
        let b = x.shape()[0];
        let row = x.numel() / b.max(1);
        let mut out = Vec::with_capacity(b);
        for chunk in chunks(b, 64) {
            let data: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| x.data()[i * row..(i + 1) * row].iter().copied())
                .collect();
            let mut shape = x.shape().to_vec();
            shape[0] = chunk.len();
            let tape = Tape::new();
            let vars = params.bind(&tape, false);
            let logp = self.forward(&vars, tape.constant(Tensor::new(shape, data)?), None)?.tensor();
            let k = self.cfg.n_classes;
            for r in logp.data().chunks(k) {
                out.push(argmax(r));
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, params: &Params, data: &SignalBatch) -> Result<MetricsReport> {
        let pred = self.predict(params, &data.data)?;
        MetricsReport::from_predictions(&data.labels, &pred, self.cfg.n_classes)
    }
}

/// `max_pool(relu(x + bias[channel]))` for `x: [N, O, T]` as one node.
/// Matches the unfused chain exactly, including lowest-index ties.
fn bias_relu_pool<'t>(x: Var<'t>, bias: Var<'t>, k: usize) -> Var<'t> {
    let s = x.shape();
    let (n, o, t) = (s[0], s[1], s[2]);
    let t_out = t / k;
    let (xv, bv) = (x.tensor(), bias.tensor());
    let mut y = Vec::with_capacity(n * o * t_out);
    // winning source index, or usize::MAX when the ReLU was inactive
    let mut arg = Vec::with_capacity(n * o * t_out);
    for r in 0..n * o {
        let b = bv.data()[r % o];
        let row = &xv.data()[r * t..(r + 1) * t];
        for j in 0..t_out {
            let win = &row[j * k..(j + 1) * k];
            let mut best = 0;
            for (i, v) in win.iter().enumerate() {
                if (v + b).max(0.0) > (win[best] + b).max(0.0) {
                    best = i;
                }
            }
            let v = win[best] + b;
            if v > 0.0 {
                y.push(v);
                arg.push(r * t + j * k + best);
            } else {
                y.push(0.0);
                arg.push(usize::MAX);
            }
        }
    }
    let out = Tensor::from_parts(vec![n, o, t_out], y);
    x.tape().custom(&[x, bias], out, move |g, _| {
        let mut gx = vec![0.0; n * o * t];
        let mut gb = vec![0.0; o];
        for (pos, (&src, &gv)) in arg.iter().zip(g.data()).enumerate() {
            if src != usize::MAX {
                gx[src] += gv;
                gb[(pos / t_out) % o] += gv;
            }
        }
        vec![Tensor::from_parts(vec![n, o, t], gx), Tensor::from_parts(vec![o], gb)]
    })
}

fn transpose(w: Var<'_>) -> Var<'_> {
    let s = w.shape();
    let (r, c) = (s[0], s[1]);
    let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
    let tape = w.tape();
    let wt = w.tensor();
    let out = Tensor::from_parts(vec![c, r], index.iter().map(|&i| wt.data()[i]).collect());
    tape.custom(&[w], out, move |g, _| {
        let mut back = vec![0.0; r * c];
        for (pos, &src) in index.iter().enumerate() {
            back[src] = g.data()[pos];
        }
        vec![Tensor::from_parts(vec![r, c], back)]
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
}

/// Mean negative log-likelihood of `labels` under log-probabilities `[B, K]`.
pub fn nll<'t>(logp: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logp.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::contract("log-probabilities and labels disagree"));
    }
    let k = s[1];
    let mut onehot = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} outside {k} classes")));
        }
        onehot[i * k + y] = 1.0;
    }
    Ok(logp
        .mul(logp.tape().constant(Tensor::from_parts(vec![labels.len(), k], onehot)))
        .sum()
        .scale(-1.0 / labels.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_epochs: 300,
            patience: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("train config", "rates, batch size, epochs and patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train config", "Adam betas must lie in [0, 1)"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("train config", "patience exceeds the epoch budget"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Params,
    v: Params,
    steps: i32,
}

impl Adam {
    pub fn new(like: &Params, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grad: &Params) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grad.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Parameters with the lowest validation loss.
    pub params: Params,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Streams used by one training run; augmentation has its own stream so an
/// identity policy leaves the other draws untouched.
pub struct TrainStreams {
    pub shuffle: RandomStream,
    pub dropout: RandomStream,
    pub augment: RandomStream,
}

impl TrainStreams {
    pub fn from(rng: &RandomStream) -> Self {
        Self {
            shuffle: rng.derive_named("shuffle"),
            dropout: rng.derive_named("dropout"),
            augment: rng.derive_named("augment"),
        }
    }
}

/// Trains from `init` with Adam and early stopping on validation loss.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    net: &ChambonNet,
    init: Params,
    train: &SignalBatch,
    valid: &SignalBatch,
    policy: Option<&PolicySet>,
    montage: Option<&Montage>,
    cfg: &TrainConfig,
    rng: &RandomStream,
) -> Result<FitResult> {
    cfg.validate()?;
    train.validate()?;
    valid.validate()?;
    if train.n_examples() == 0 || valid.n_examples() == 0 {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let mut streams = TrainStreams::from(rng);
    let mut params = init;
    let mut adam = Adam::new(&params, cfg);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.n_examples()).collect();
    let mut batch_index = 0usize;
    for epoch in 0..cfg.max_epochs {
        streams.shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut batch = train.select(idx);
            if let Some(p) = policy {
                batch = apply_policy(p, &batch, montage, &mut streams.augment)?;
            }
            let (loss, grad) = net.loss_and_grad(&params, &batch.data, &batch.labels, Some(&mut streams.dropout))?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at batch {batch_index} (epoch {epoch}), parameter norm {}",
                    params.norm()
                )));
            }
            adam.step(&mut params, &grad);
            total += loss * idx.len() as f64;
            batch_index += 1;
        }
        let valid_loss = net.loss(&params, valid)?;
        history.push(EpochStats {
            epoch,
            train_loss: total / train.n_examples() as f64,
            valid_loss,
        });
        if valid_loss < best.0 {
            best = (valid_loss, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitResult {
        params: best.1,
        history,
        best_epoch: best.2,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// `None` for classes absent from the labels.
    pub per_class_f1: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub absent_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::contract("labels and predictions differ in length"));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= n_classes || p >= n_classes {
                return Err(Error::contract(format!("class index outside 0..{n_classes}")));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion.len();
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<usize> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
        if present.is_empty() {
            return Err(Error::contract("no labelled examples"));
        }
        let mut per_class_f1 = vec![None; k];
        let mut recall_sum = 0.0;
        let mut f1_sum = 0.0;
        for &c in &present {
            let tp = confusion[c][c] as f64;
            recall_sum += tp / support[c] as f64;
            let f1 = 2.0 * tp / (support[c] + predicted[c]) as f64;
            per_class_f1[c] = Some(f1);
            f1_sum += f1;
        }
        Ok(Self {
            balanced_accuracy: recall_sum / present.len() as f64,
            macro_f1: f1_sum / present.len() as f64,
            per_class_f1,
            absent_classes: (0..k).filter(|&c| support[c] == 0).collect(),
            confusion,
        })
    }
}

const CHECKPOINT_MAGIC: &str = "augsearch-checkpoint 1";

/// Writes a text header (config and parameter shapes) followed by the
/// parameters as little-endian f64.
pub fn save_checkpoint(path: &Path, net: &ChambonNet, params: &Params) -> Result<()> {
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nconfig {} {} {} {}\n",
        net.cfg.n_channels, net.cfg.n_times, net.cfg.n_classes, net.cfg.dropout
    );
    for ((name, shape), t) in net.param_specs().iter().zip(&params.tensors) {
        if t.shape() != shape.as_slice() {
            return Err(Error::contract(format!("parameter {name} has shape {:?}", t.shape())));
        }
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("param {name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for t in &params.tensors {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ChambonNet, Params)> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::Corrupt {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let end = bytes
        .windows(4)
        .position(|w| w == b"end\n")
        .ok_or_else(|| corrupt("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(corrupt("unknown checkpoint version"));
    }
    let cfg_line = lines.next().ok_or_else(|| corrupt("missing config line"))?;
    let f: Vec<&str> = cfg_line.split_whitespace().collect();
    if f.len() != 5 || f[0] != "config" {
        return Err(corrupt("bad config line"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad config value"));
    let cfg = ChambonNetConfig {
        n_channels: num(f[1])?,
        n_times: num(f[2])?,
        n_classes: num(f[3])?,
        dropout: f[4].parse().map_err(|_| corrupt("bad dropout"))?,
    };
    let net = ChambonNet::new(cfg)?;
    let specs = net.param_specs();
    let mut at = end + 4;
    let mut tensors = Vec::new();
    for (name, shape) in &specs {
        let line = lines.next().ok_or_else(|| corrupt("missing parameter line"))?;
        let expect = format!(
            "param {name} {}",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
        );
        if line != expect {
            return Err(corrupt(&format!("expected '{expect}', found '{line}'")));
        }
        let n: usize = shape.iter().product();
        let raw = bytes.get(at..at + 8 * n).ok_or_else(|| corrupt("truncated parameter data"))?;
        at += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        tensors.push(Tensor::from_parts(shape.clone(), data));
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes after parameters"));
    }
    Ok((net, Params { tensors }))
}

#[cfg(test)]
mod tests;
