//! The thirteen signal augmentations, each usable in a hard stochastic form
//! and a relaxed form that is differentiable in its probability and magnitude.
//!
//! Every operation is split in two steps. [`OpNoise::draw`] takes all random
//! numbers an operation needs from a [`RandomStream`]; [`apply_op`] is then a
//! deterministic function of the signal, the parameters and that noise. Hard
//! and relaxed forms consume the same noise, so a relaxed gate that ends up
//! above one half corresponds exactly to a hard gate that fires.

mod filter;
mod montage;
mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use filter::{bandstop_taps, hamming, lowpass_taps, odd_length, ZeroPhaseFir};
pub use montage::Montage;
pub use ops::{
    analytic_signal, bandstop_filter, rotation_weights, time_mask_window, BANDSTOP_FILTER_SECONDS,
    FREQ_SHIFT_MAX_HZ, MASK_STEEPNESS, MAX_ROTATION_RAD, NOISE_MAX_STD, TIME_MASK_MAX_S,
};

use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::estimators::{hard_bernoulli, relaxed_bernoulli, BERNOULLI_TEMPERATURE};
use crate::rng::RandomStream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    TimeReverse,
    SignFlip,
    FtSurrogate,
    FrequencyShift,
    Bandstop,
    TimeMask,
    GaussianNoise,
    ChannelDropout,
    ChannelShuffle,
    ChannelSymmetry,
    RotationX,
    RotationY,
    RotationZ,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::TimeReverse,
        OpKind::SignFlip,
        OpKind::FtSurrogate,
        OpKind::FrequencyShift,
        OpKind::Bandstop,
        OpKind::TimeMask,
        OpKind::GaussianNoise,
        OpKind::ChannelDropout,
        OpKind::ChannelShuffle,
        OpKind::ChannelSymmetry,
        OpKind::RotationX,
        OpKind::RotationY,
        OpKind::RotationZ,
    ];

    /// The twelve operations with a relaxed form.
    pub fn differentiable_pool() -> Vec<OpKind> {
        Self::ALL.iter().copied().filter(|k| k.is_differentiable()).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::TimeReverse => "time_reverse",
            OpKind::SignFlip => "sign_flip",
            OpKind::FtSurrogate => "ft_surrogate",
            OpKind::FrequencyShift => "frequency_shift",
            OpKind::Bandstop => "bandstop",
            OpKind::TimeMask => "time_mask",
            OpKind::GaussianNoise => "gaussian_noise",
            OpKind::ChannelDropout => "channel_dropout",
            OpKind::ChannelShuffle => "channel_shuffle",
            OpKind::ChannelSymmetry => "channel_symmetry",
            OpKind::RotationX => "rotation_x",
            OpKind::RotationY => "rotation_y",
            OpKind::RotationZ => "rotation_z",
        }
    }

    pub fn has_magnitude(self) -> bool {
        !matches!(
            self,
            OpKind::TimeReverse | OpKind::SignFlip | OpKind::ChannelSymmetry
        )
    }

    pub fn is_differentiable(self) -> bool {
        self != OpKind::Bandstop
    }

    pub fn needs_montage(self) -> bool {
        matches!(
            self,
            OpKind::ChannelSymmetry | OpKind::RotationX | OpKind::RotationY | OpKind::RotationZ
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse("kind", format!("unknown operation '{s}'")))
    }
}

/// One operation instance with its probability and magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugOpSpec {
    pub kind: OpKind,
    pub p: f64,
    /// Ignored by operations without a magnitude.
    pub mu: f64,
    pub differentiable: bool,
}

impl AugOpSpec {
    pub fn new(kind: OpKind, p: f64, mu: f64) -> Result<Self> {
        let spec = Self {
            kind,
            p,
            mu,
            differentiable: kind.is_differentiable(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid("p", format!("{} outside [0, 1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid("mu", format!("{} outside [0, 1]", self.mu)));
        }
        if self.differentiable && !self.kind.is_differentiable() {
            return Err(Error::contract(format!("{} has no relaxed form", self.kind)));
        }
        Ok(())
    }

    /// Clamps `p` and `mu` into `[0, 1]`.
    pub fn clamp(&mut self) {
        self.p = self.p.clamp(0.0, 1.0);
        self.mu = self.mu.clamp(0.0, 1.0);
    }
}

/// `B x C x T` windows with sampling rate and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBatch {
    pub data: Tensor,
    pub sfreq: f64,
    pub labels: Vec<usize>,
}

impl SignalBatch {
    pub fn new(data: Tensor, sfreq: f64, labels: Vec<usize>) -> Result<Self> {
        let batch = Self { data, sfreq, labels };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.len() != 3 {
            return Err(Error::contract(format!("signal batch must be B x C x T, got {s:?}")));
        }
        if s[1] < 1 || s[2] < 2 {
            return Err(Error::contract(format!("need C >= 1 and T >= 2, got {s:?}")));
        }
        if !self.data.is_finite() {
            return Err(Error::NonFinite("signal batch".into()));
        }
        if !(self.sfreq > 0.0) {
            return Err(Error::contract("sampling rate must be positive"));
        }
        if self.labels.len() != s[0] {
            return Err(Error::contract(format!(
                "{} labels for {} examples",
                self.labels.len(),
                s[0]
            )));
        }
        Ok(())
    }

    pub fn n_examples(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_times(&self) -> usize {
        self.data.shape()[2]
    }

    /// Examples picked by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SignalBatch {
        let row = self.n_channels() * self.n_times();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * row..(i + 1) * row]);
        }
        SignalBatch {
            data: Tensor::from_parts(vec![indices.len(), self.n_channels(), self.n_times()], data),
            sfreq: self.sfreq,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Gate and random-draw handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Bernoulli gates and hard channel masks.
    Hard,
    /// Relaxed Bernoulli gates and masks, differentiable in `p` and `mu`.
    Relaxed,
}

/// Everything an operation needs besides the signal and its parameters.
#[derive(Clone, Copy, Debug)]
pub struct AugContext<'m> {
    pub sfreq: f64,
    pub montage: Option<&'m Montage>,
    /// Temperature of relaxed gates and masks.
    pub temperature: f64,
}

impl<'m> AugContext<'m> {
    pub fn new(sfreq: f64, montage: Option<&'m Montage>) -> Self {
        Self {
            sfreq,
            montage,
            temperature: BERNOULLI_TEMPERATURE,
        }
    }
}

/// Pre-drawn randomness for one operation on one batch.
///
/// `gate` holds one uniform per example. The meaning of `values` and `keys`
/// depends on the operation:
///
/// | operation | `values` | `keys` |
/// |---|---|---|
/// | ft_surrogate | uniforms, `B*C*F` for the `F` strictly positive non-Nyquist bins | - |
/// | frequency_shift, bandstop, time_mask, rotations | one uniform per example | - |
/// | gaussian_noise | standard normals, `B*C*T` | - |
/// | channel_dropout | uniforms, `B*C` | - |
/// | channel_shuffle | selection uniforms, `B*C` | ordering keys, `B*C` |
#[derive(Clone, Debug, PartialEq)]
pub struct OpNoise {
    pub gate: Vec<f64>,
    pub values: Vec<f64>,
    pub keys: Vec<f64>,
}

/// Number of phase-randomised bins of a length-`t` spectrum.
pub fn n_positive_bins(t: usize) -> usize {
    (t - 1) / 2
}

impl OpNoise {
    pub fn draw(kind: OpKind, shape: [usize; 3], rng: &mut RandomStream) -> Self {
        let [b, c, t] = shape;
        let gate = rng.uniforms(b);
        let (values, keys) = match kind {
            OpKind::TimeReverse | OpKind::SignFlip | OpKind::ChannelSymmetry => (Vec::new(), Vec::new()),
            OpKind::FtSurrogate => (rng.uniforms(b * c * n_positive_bins(t)), Vec::new()),
            OpKind::FrequencyShift
            | OpKind::Bandstop
            | OpKind::TimeMask
            | OpKind::RotationX
            | OpKind::RotationY
            | OpKind::RotationZ => (rng.uniforms(b), Vec::new()),
            OpKind::GaussianNoise => (rng.normals(b * c * t), Vec::new()),
            OpKind::ChannelDropout => (rng.uniforms(b * c), Vec::new()),
            OpKind::ChannelShuffle => (rng.uniforms(b * c), rng.uniforms(b * c)),
        };
        Self { gate, values, keys }
    }
}

/// Reshapes a scalar or length-`B` parameter to length `B`.
fn per_example<'t>(v: Var<'t>, b: usize, what: &str) -> Result<Var<'t>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    if n == 1 {
        Ok(v.reshape(&[]).broadcast_to(&[b]))
    } else if shape == [b] {
        Ok(v)
    } else {
        Err(Error::contract(format!(
            "{what} must be a scalar or have one entry per example, got {shape:?}"
        )))
    }
}

fn check_unit_interval(v: Var<'_>, what: &str) -> Result<()> {
    for &x in v.tensor().data() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::contract(format!("{what} = {x} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Applies one operation with gating `b O(X) + (1 - b) X`.
///
/// `x` is `B x C x T`; `p` and `mu` are scalars or length-`B` vectors.
pub fn apply_op<'t>(
    kind: OpKind,
    x: Var<'t>,
    p: Var<'t>,
    mu: Var<'t>,
    noise: &OpNoise,
    mode: Mode,
    ctx: &AugContext<'_>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::contract(format!("expected B x C x T input, got {shape:?}")));
    }
    let b = shape[0];
    if mode == Mode::Relaxed && !kind.is_differentiable() {
        return Err(Error::contract(format!("{kind} has no relaxed form")));
    }
    if noise.gate.len() != b {
        return Err(Error::contract("gate noise does not match the batch"));
    }
    let p = per_example(p, b, "p")?;
    let mu = per_example(mu, b, "mu")?;
    check_unit_interval(p, "p")?;
    check_unit_interval(mu, "mu")?;
    let tape = x.tape();
    match mode {
        Mode::Hard => {
            let pv = p.tensor();
            let gates: Vec<f64> = pv
                .data()
                .iter()
                .zip(&noise.gate)
                .map(|(&pi, &u)| f64::from(u8::from(hard_bernoulli(pi, u))))
                .collect();
            if gates.iter().all(|&g| g == 0.0) {
                return Ok(x);
            }
            let out = ops::transform(kind, x, mu, noise, mode, ctx)?;
            if gates.iter().all(|&g| g == 1.0) {
                return Ok(out);
            }
            let g = tape.constant(Tensor::new(vec![b, 1, 1], gates.clone())?);
            let keep = tape.constant(Tensor::new(
                vec![b, 1, 1],
                gates.iter().map(|v| 1.0 - v).collect(),
            )?);
            Ok(out.mul_bcast(g).add(x.mul_bcast(keep)))
        }
        Mode::Relaxed => {
            let out = ops::transform(kind, x, mu, noise, mode, ctx)?;
            let g = relaxed_bernoulli(p, &noise.gate, ctx.temperature)?.reshape(&[b, 1, 1]);
            let keep = g.neg().add_scalar(1.0);
            Ok(out.mul_bcast(g).add(x.mul_bcast(keep)))
        }
    }
}

/// Reverse-mode versus central-difference gradient of `sum(w * O(x; p, mu))`
/// with respect to `(p, mu)`, under frozen noise drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn relaxation_gradcheck(
    kind: OpKind,
    x: &Tensor,
    weights: &Tensor,
    p: f64,
    mu: f64,
    ctx: &AugContext<'_>,
    rng: &mut RandomStream,
    h: f64,
) -> Result<GradCheckReport> {
    if x.ndim() != 3 || x.shape() != weights.shape() {
        return Err(Error::contract("input and weights must share a B x C x T shape"));
    }
    let noise = OpNoise::draw(kind, [x.shape()[0], x.shape()[1], x.shape()[2]], rng);
    grad_check(
        |t, params| {
            let out = apply_op(
                kind,
                t.constant(x.clone()),
                params.slice(0, 0, 1),
                params.slice(0, 1, 2),
                &noise,
                Mode::Relaxed,
                ctx,
            )?;
            Ok(out.mul(t.constant(weights.clone())).sum())
        },
        &Tensor::vector(&[p, mu]),
        h,
    )
}

/// Hard-mode application of `spec` to a whole batch.
pub fn augment_batch(
    batch: &SignalBatch,
    spec: &AugOpSpec,
    montage: Option<&Montage>,
    rng: &mut RandomStream,
) -> Result<SignalBatch> {
    batch.validate()?;
    spec.validate()?;
    let shape = [batch.n_examples(), batch.n_channels(), batch.n_times()];
    let noise = OpNoise::draw(spec.kind, shape, rng);
    let tape = Tape::new();
    let x = tape.constant(batch.data.clone());
    let ctx = AugContext::new(batch.sfreq, montage);
    let out = apply_op(
        spec.kind,
        x,
        tape.scalar(spec.p),
        tape.scalar(spec.mu),
        &noise,
        Mode::Hard,
        &ctx,
    )?;
    Ok(SignalBatch {
        data: out.tensor(),
        sfreq: batch.sfreq,
        labels: batch.labels.clone(),
    })
}
