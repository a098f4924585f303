//! Reparameterised samplers and discrete-gradient estimators.
//!
//! Gates are relaxed Bernoulli (Concrete) variables. Operation choice is a
//! straight-through Gumbel-softmax sample whose selection weights are trained
//! with RELAX: a score-function term with a control variate plus the pathwise
//! gradients of that control variate at the relaxed sample and at a relaxed
//! sample drawn conditionally on the discrete outcome.

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::{gumbel_from_uniform, RandomStream};
use crate::{Error, Result};

pub const BERNOULLI_TEMPERATURE: f64 = 0.05;
pub const GUMBEL_TEMPERATURE: f64 = 0.5;

const U_CLAMP: f64 = 1e-10;

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic noise from a uniform draw, clamped away from the endpoints.
pub fn logistic_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    u.ln() - (-u).ln_1p()
}

/// The hard gate paired with [`relaxed_bernoulli`]: both fire when `u > 1 - p`
/// (the boundary counts as firing so that `p = 1` always fires).
pub fn hard_bernoulli(p: f64, u: f64) -> bool {
    u >= 1.0 - p
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxedBernoulli {
    pub p: f64,
    pub temperature: f64,
}

impl RelaxedBernoulli {
    pub fn new(p: f64) -> Self {
        Self {
            p,
            temperature: BERNOULLI_TEMPERATURE,
        }
    }

    /// Forward value for a given uniform draw, without a tape.
    pub fn value(&self, u: f64) -> f64 {
        relaxed_value(self.p, logistic_from_uniform(u), self.temperature)
    }
}

fn relaxed_value(p: f64, noise: f64, temperature: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        sigmoid((logit(p) + noise) / temperature)
    }
}

fn check_probabilities(p: &Tensor) -> Result<()> {
    for &v in p.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("probability {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Elementwise `sigmoid((logit p + noise) / temperature)`, differentiable in `p`.
pub fn relaxed_bernoulli<'t>(p: Var<'t>, uniforms: &[f64], temperature: f64) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let pv = p.tensor();
    check_probabilities(&pv)?;
    if pv.numel() != uniforms.len() {
        return Err(Error::contract(format!(
            "{} probabilities but {} noise draws",
            pv.numel(),
            uniforms.len()
        )));
    }
    let noise: Vec<f64> = uniforms.iter().map(|&u| logistic_from_uniform(u)).collect();
    let y: Vec<f64> = pv
        .data()
        .iter()
        .zip(&noise)
        .map(|(&pi, &n)| relaxed_value(pi, n, temperature))
        .collect();
    let out = Tensor::from_parts(pv.shape().to_vec(), y.clone());
    Ok(p.tape().custom(&[p], out, move |g, ins| {
        let d = g
            .data()
            .iter()
            .zip(ins[0].data())
            .zip(&y)
            .map(|((&gi, &pi), &yi)| {
                let s = yi * (1.0 - yi);
                if s == 0.0 || pi <= 0.0 || pi >= 1.0 {
                    0.0
                } else {
                    gi * s / (temperature * pi * (1.0 - pi))
                }
            })
            .collect();
        vec![Tensor::from_parts(g.shape().to_vec(), d)]
    }))
}

/// Draws one relaxed gate per element of `p` from `rng`.
pub fn sample_relaxed_bernoulli<'t>(
    p: Var<'t>,
    temperature: f64,
    rng: &mut RandomStream,
) -> Result<Var<'t>> {
    let u = rng.uniforms(p.tensor().numel());
    relaxed_bernoulli(p, &u, temperature)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelSoftmaxST {
    pub temperature: f64,
}

impl Default for GumbelSoftmaxST {
    fn default() -> Self {
        Self {
            temperature: GUMBEL_TEMPERATURE,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_finite(w: &Tensor) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("selection weights {:?}", w.data())))
    }
}

/// Straight-through Gumbel-softmax with given Gumbel noise. The forward value
/// is the one-hot argmax of `w + g`; the backward pass sees
/// `softmax((w + g) / temperature)`. Returns the sample and the chosen index.
pub fn gumbel_softmax_st<'t>(w: Var<'t>, gumbel: &[f64], temperature: f64) -> Result<(Var<'t>, usize)> {
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let wv = w.tensor();
    check_finite(&wv)?;
    if wv.ndim() != 1 || wv.numel() != gumbel.len() {
        return Err(Error::contract("Gumbel-softmax needs a weight vector matching the noise"));
    }
    let perturbed: Vec<f64> = wv.data().iter().zip(gumbel).map(|(a, b)| a + b).collect();
    let k = argmax(&perturbed);
    let tape = w.tape();
    let soft = w
        .add(tape.constant(Tensor::vector(gumbel)))
        .scale(1.0 / temperature)
        .softmax();
    let mut hard = vec![0.0; gumbel.len()];
    hard[k] = 1.0;
    Ok((soft.straight_through(Tensor::vector(&hard)), k))
}

pub fn sample_gumbel_softmax_st<'t>(
    w: Var<'t>,
    d: GumbelSoftmaxST,
    rng: &mut RandomStream,
) -> Result<(Var<'t>, usize)> {
    let n = w.tensor().numel();
    let g: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
    gumbel_softmax_st(w, &g, d.temperature)
}

pub fn softmax(w: &[f64]) -> Vec<f64> {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn one_hot(n: usize, k: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    Tensor::vector(&v)
}

/// Control variate used by RELAX.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surrogate {
    /// The objective itself evaluated at the relaxed point.
    RelaxedLoss,
    /// A one-hidden-layer critic trained to minimise estimator variance.
    Critic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxConfig {
    pub surrogate: Surrogate,
    pub critic_width: usize,
    pub critic_lr: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            surrogate: Surrogate::RelaxedLoss,
            critic_width: 16,
            critic_lr: 1e-2,
        }
    }
}

/// Noise for one RELAX sample: Gumbel uniforms for the forward sample and
/// uniforms for the conditional resample.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxNoise {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl RelaxNoise {
    pub fn draw(n: usize, rng: &mut RandomStream) -> Self {
        Self {
            u: rng.uniforms(n),
            v: rng.uniforms(n),
        }
    }

    /// Discrete outcome for weights `w`.
    pub fn choice(&self, w: &[f64]) -> usize {
        let z: Vec<f64> = w
            .iter()
            .zip(&self.u)
            .map(|(a, &u)| a + gumbel_from_uniform(u))
            .collect();
        argmax(&z)
    }
}

/// Relaxed point `softmax(z / temperature)` with `z = log_softmax(w) + g`.
pub fn relaxed_point<'t>(w: Var<'t>, noise: &RelaxNoise, temperature: f64) -> Var<'t> {
    let g: Vec<f64> = noise.u.iter().map(|&u| gumbel_from_uniform(u)).collect();
    w.log_softmax()
        .add(w.tape().constant(Tensor::vector(&g)))
        .scale(1.0 / temperature)
        .softmax()
}

/// Relaxed point of the conditional sample `z~ | b = k`:
/// `z~_k = -ln(-ln v_k)` and `z~_i = -ln(-ln v_i / p_i - ln v_k)` otherwise.
/// Evaluated in log space so saturated logits stay finite.
pub fn conditional_relaxed_point<'t>(
    w: Var<'t>,
    k: usize,
    noise: &RelaxNoise,
    temperature: f64,
) -> Var<'t> {
    let tape = w.tape();
    let n = noise.v.len();
    let v: Vec<f64> = noise.v.iter().map(|&v| v.clamp(U_CLAMP, 1.0 - U_CLAMP)).collect();
    let ln_neg_ln_v: Vec<f64> = v.iter().map(|x| (-x.ln()).ln()).collect();
    let c = ln_neg_ln_v[k];
    // -ln(e^a + e^c) with a = ln(-ln v_i) - log p_i
    let shifted = tape
        .constant(Tensor::vector(&ln_neg_ln_v))
        .sub(w.log_softmax())
        .add_scalar(-c);
    let others = tape.elementwise(shifted, softplus, |x, _| sigmoid(x)).add_scalar(c).neg();
    let mut mask = vec![1.0; n];
    mask[k] = 0.0;
    let mut fixed = vec![0.0; n];
    fixed[k] = -c;
    let z = others
        .mul(tape.constant(Tensor::vector(&mask)))
        .add(tape.constant(Tensor::vector(&fixed)));
    z.scale(1.0 / temperature).softmax()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(f(b) - c(z~)) (e_b - softmax w) + grad c(z) - grad c(z~)`.
pub fn relax_combine(
    w: &[f64],
    choice: usize,
    f_hard: f64,
    c_tilde: f64,
    grad_c_z: &[f64],
    grad_c_tilde: &[f64],
) -> Vec<f64> {
    let p = softmax(w);
    (0..w.len())
        .map(|i| {
            let score = f64::from(u8::from(i == choice)) - p[i];
            (f_hard - c_tilde) * score + grad_c_z[i] - grad_c_tilde[i]
        })
        .collect()
}

/// `c(u) = v . tanh(A u + a) + b` on simplex points `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub a_mat: Tensor,
    pub a_bias: Tensor,
    pub v: Tensor,
    pub bias: f64,
    pub lr: f64,
}

/// Gradient of a scalar with respect to every critic parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticGrad {
    pub a_mat: Tensor,
    pub a_bias: Tensor,
    pub v: Tensor,
    pub bias: f64,
}

impl Critic {
    pub fn new(n_inputs: usize, width: usize, lr: f64, rng: &mut RandomStream) -> Self {
        let bound = 1.0 / (n_inputs as f64).sqrt();
        let vb = 1.0 / (width as f64).sqrt();
        let a: Vec<f64> = (0..width * n_inputs)
            .map(|_| bound * (2.0 * rng.uniform() - 1.0))
            .collect();
        let ab: Vec<f64> = (0..width).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        let v: Vec<f64> = (0..width).map(|_| vb * (2.0 * rng.uniform() - 1.0)).collect();
        Self {
            a_mat: Tensor::from_parts(vec![width, n_inputs], a),
            a_bias: Tensor::vector(&ab),
            v: Tensor::vector(&v),
            bias: 0.0,
            lr,
        }
    }

    pub fn width(&self) -> usize {
        self.v.numel()
    }

    pub fn n_inputs(&self) -> usize {
        self.a_mat.shape()[1]
    }

    /// Critic value on a tape, differentiable in the input point.
    pub fn eval<'t>(&self, u: Var<'t>) -> Var<'t> {
        let tape = u.tape();
        let n = self.n_inputs();
        let h = u
            .reshape(&[1, n])
            .matmul(tape.constant(transpose(&self.a_mat)))
            .reshape(&[self.width()])
            .add(tape.constant(self.a_bias.clone()))
            .tanh();
        h.mul(tape.constant(self.v.clone())).sum().add_scalar(self.bias)
    }

    fn hidden(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n_inputs();
        (0..self.width())
            .map(|k| {
                let row = &self.a_mat.data()[k * n..(k + 1) * n];
                let s: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                (s + self.a_bias.data()[k]).tanh()
            })
            .collect()
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let t = self.hidden(u);
        t.iter().zip(self.v.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    fn zero_grad(&self) -> CriticGrad {
        CriticGrad {
            a_mat: Tensor::zeros(self.a_mat.shape()),
            a_bias: Tensor::zeros(self.a_bias.shape()),
            v: Tensor::zeros(self.v.shape()),
            bias: 0.0,
        }
    }

    /// Adds `scale * d c(u) / d params` into `acc`.
    fn add_value_grad(&self, u: &[f64], scale: f64, acc: &mut CriticGrad) {
        let n = self.n_inputs();
        let t = self.hidden(u);
        for k in 0..self.width() {
            let dt = 1.0 - t[k] * t[k];
            let vk = self.v.data()[k];
            acc.v.data_mut()[k] += scale * t[k];
            acc.a_bias.data_mut()[k] += scale * vk * dt;
            for j in 0..n {
                acc.a_mat.data_mut()[k * n + j] += scale * vk * dt * u[j];
            }
        }
        acc.bias += scale;
    }

    /// Adds `scale * d/d params [ d . grad_u c(u) ]` into `acc`.
    fn add_directional_grad(&self, u: &[f64], d: &[f64], scale: f64, acc: &mut CriticGrad) {
        let n = self.n_inputs();
        let t = self.hidden(u);
        for k in 0..self.width() {
            let row = &self.a_mat.data()[k * n..(k + 1) * n];
            let ad: f64 = row.iter().zip(d).map(|(a, b)| a * b).sum();
            let tk = t[k];
            let dt = 1.0 - tk * tk;
            let vk = self.v.data()[k];
            acc.v.data_mut()[k] += scale * dt * ad;
            acc.a_bias.data_mut()[k] += scale * vk * (-2.0 * tk * dt) * ad;
            for j in 0..n {
                acc.a_mat.data_mut()[k * n + j] +=
                    scale * vk * (-2.0 * tk * dt * u[j] * ad + dt * d[j]);
            }
        }
    }

    fn apply(&mut self, g: &CriticGrad) {
        let lr = self.lr;
        for (p, d) in self.a_mat.data_mut().iter_mut().zip(g.a_mat.data()) {
            *p -= lr * d;
        }
        for (p, d) in self.a_bias.data_mut().iter_mut().zip(g.a_bias.data()) {
            *p -= lr * d;
        }
        for (p, d) in self.v.data_mut().iter_mut().zip(g.v.data()) {
            *p -= lr * d;
        }
        self.bias -= lr * g.bias;
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Tangent of the relaxed point `u = softmax(z / temperature)` along `dz`.
fn relaxed_tangent(u: &[f64], dz: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = u.iter().zip(dz).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(dz)
        .map(|(ui, di)| ui * (di - dot) / temperature)
        .collect()
}

/// Directional derivative of the forward relaxed point along `dw`.
pub fn relaxed_point_tangent(u: &[f64], dw: &[f64], temperature: f64) -> Vec<f64> {
    // The log-softmax shift is constant across entries and cancels.
    relaxed_tangent(u, dw, temperature)
}

/// Directional derivative of the conditional relaxed point along `dw`.
pub fn conditional_point_tangent(
    w: &[f64],
    k: usize,
    noise: &RelaxNoise,
    u_tilde: &[f64],
    dw: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let p = softmax(w);
    let pd: f64 = p.iter().zip(dw).map(|(a, b)| a * b).sum();
    let v: Vec<f64> = noise.v.iter().map(|&v| v.clamp(U_CLAMP, 1.0 - U_CLAMP)).collect();
    let ln_vk = v[k].ln();
    let dz: Vec<f64> = (0..w.len())
        .map(|i| {
            if i == k {
                return 0.0;
            }
            let ln_vi = v[i].ln();
            let r = ln_vi / (ln_vi + p[i] * ln_vk);
            r * (dw[i] - pd)
        })
        .collect();
    relaxed_tangent(u_tilde, &dz, temperature)
}

/// One RELAX draw.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxSample {
    pub gradient: Vec<f64>,
    pub choice: usize,
    pub f_hard: f64,
}

fn eval_objective<F>(objective: &F, point: Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.constant(point.clone());
    let v = objective(&tape, x)?.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "objective returned {v} at point {:?}",
            point.data()
        )))
    }
}

fn surrogate_and_grad<F>(
    objective: &F,
    critic: Option<&Critic>,
    w: &Tensor,
    build: impl for<'t> Fn(Var<'t>) -> Var<'t>,
) -> Result<(f64, Vec<f64>, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let wl = tape.leaf(w.clone());
    let u = build(wl);
    let c = match critic {
        Some(cr) => cr.eval(u),
        None => objective(&tape, u)?,
    };
    let value = c.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "control variate returned {value} at point {:?}",
            u.tensor().data()
        )));
    }
    let g = tape.backward(c)?.wrt(wl).into_data();
    Ok((value, g, u.tensor().into_data()))
}

/// Single-sample RELAX estimate of `grad_w E_{b ~ softmax(w)} f(b)`.
///
/// `objective` is called on one-hot vectors and, for the relaxed-loss
/// surrogate, on interior simplex points. When `cfg.surrogate` is
/// [`Surrogate::Critic`] a critic must be supplied; it takes one SGD step on
/// the squared estimate.
pub fn relax_gradient<F>(
    objective: F,
    w: &[f64],
    d: GumbelSoftmaxST,
    cfg: &RelaxConfig,
    critic: Option<&mut Critic>,
    rng: &mut RandomStream,
) -> Result<RelaxSample>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let wt = Tensor::vector(w);
    check_finite(&wt)?;
    let n = w.len();
    let noise = RelaxNoise::draw(n, rng);
    let k = noise.choice(w);
    let f_hard = eval_objective(&objective, one_hot(n, k))?;
    let critic = match cfg.surrogate {
        Surrogate::RelaxedLoss => None,
        Surrogate::Critic => Some(critic.ok_or_else(|| {
            Error::contract("critic surrogate selected but no critic supplied")
        })?),
    };
    let tau = d.temperature;
    let (_, g_z, u) = surrogate_and_grad(&objective, critic.as_deref(), &wt, |wl| {
        relaxed_point(wl, &noise, tau)
    })?;
    let (c_t, g_t, u_t) = surrogate_and_grad(&objective, critic.as_deref(), &wt, |wl| {
        conditional_relaxed_point(wl, k, &noise, tau)
    })?;
    let gradient = relax_combine(w, k, f_hard, c_t, &g_z, &g_t);
    if let Some(cr) = critic {
        let step = critic_variance_grad(cr, w, k, &noise, &u, &u_t, &gradient, tau);
        cr.apply(&step);
    }
    Ok(RelaxSample {
        gradient,
        choice: k,
        f_hard,
    })
}

/// RELAX estimate from an outcome evaluated elsewhere: `f_hard` is the
/// objective at `noise.choice(w)`. With `learn` set, the critic then takes
/// one step on the squared estimate.
pub fn relax_with_critic(
    w: &[f64],
    noise: &RelaxNoise,
    f_hard: f64,
    critic: &mut Critic,
    temperature: f64,
    learn: bool,
) -> Result<Vec<f64>> {
    let wt = Tensor::vector(w);
    check_finite(&wt)?;
    if !f_hard.is_finite() {
        return Err(Error::NonFinite(format!("outcome value {f_hard}")));
    }
    let k = noise.choice(w);
    let eval = |build: &dyn for<'t> Fn(Var<'t>) -> Var<'t>| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let wl = tape.leaf(wt.clone());
        let u = build(wl);
        let c = critic.eval(u);
        let g = tape.backward(c)?.wrt(wl).into_data();
        Ok((c.item(), g, u.tensor().into_data()))
    };
    let (_, g_z, u) = eval(&|wl| relaxed_point(wl, noise, temperature))?;
    let (c_t, g_t, u_t) = eval(&|wl| conditional_relaxed_point(wl, k, noise, temperature))?;
    let gradient = relax_combine(w, k, f_hard, c_t, &g_z, &g_t);
    if learn {
        let step = critic_variance_grad(critic, w, k, noise, &u, &u_t, &gradient, temperature);
        critic.apply(&step);
    }
    Ok(gradient)
}

/// Gradient of `|g|^2` with respect to the critic parameters, where `g` is the
/// RELAX estimate produced with this critic and noise.
#[allow(clippy::too_many_arguments)]
pub fn critic_variance_grad(
    critic: &Critic,
    w: &[f64],
    k: usize,
    noise: &RelaxNoise,
    u: &[f64],
    u_tilde: &[f64],
    estimate: &[f64],
    temperature: f64,
) -> CriticGrad {
    let p = softmax(w);
    let score_dot: f64 = (0..w.len())
        .map(|i| (f64::from(u8::from(i == k)) - p[i]) * estimate[i])
        .sum();
    let d = relaxed_point_tangent(u, estimate, temperature);
    let d_t = conditional_point_tangent(w, k, noise, u_tilde, estimate, temperature);
    let mut acc = critic.zero_grad();
    critic.add_value_grad(u_tilde, -2.0 * score_dot, &mut acc);
    critic.add_directional_grad(u, &d, 2.0, &mut acc);
    critic.add_directional_grad(u_tilde, &d_t, -2.0, &mut acc);
    acc
}

/// Score-function estimate `f(b) (e_b - softmax w)`.
pub fn reinforce_gradient<F>(objective: F, w: &[f64], rng: &mut RandomStream) -> Result<RelaxSample>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_finite(&Tensor::vector(w))?;
    let n = w.len();
    let g: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
    let z: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a + b).collect();
    let k = argmax(&z);
    let f_hard = eval_objective(&objective, one_hot(n, k))?;
    let p = softmax(w);
    let gradient = (0..n)
        .map(|i| f_hard * (f64::from(u8::from(i == k)) - p[i]))
        .collect();
    Ok(RelaxSample {
        gradient,
        choice: k,
        f_hard,
    })
}

/// Exact `grad_w sum_n softmax(w)_n f_n` given the outcome values `f_n`.
pub fn enumerated_gradient(values: &[f64], w: &[f64]) -> Vec<f64> {
    let p = softmax(w);
    let mean: f64 = p.iter().zip(values).map(|(a, b)| a * b).sum();
    p.iter().zip(values).map(|(pi, fi)| pi * (fi - mean)).collect()
}

/// Exact gradient of `E[f]` by evaluating `objective` on every one-hot.
pub fn enumerated_categorical_gradient<F>(objective: F, w: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let n = w.len();
    if n > 32 {
        return Err(Error::contract(format!("cannot enumerate {n} categories")));
    }
    let values = (0..n)
        .map(|k| eval_objective(&objective, one_hot(n, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(enumerated_gradient(&values, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    fn linear_objective(coef: &'static [f64]) -> impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> {
        move |t, x| Ok(x.mul(t.constant(Tensor::vector(coef))).sum())
    }

    #[test]
    fn certain_gate_is_exact() {
        let mut rng = RandomStream::new(1, 0);
        let tape = Tape::new();
        for _ in 0..100 {
            let p = tape.leaf(Tensor::scalar(1.0));
            assert_eq!(sample_relaxed_bernoulli(p, 0.05, &mut rng).unwrap().item(), 1.0);
            let p = tape.leaf(Tensor::scalar(0.0));
            assert_eq!(sample_relaxed_bernoulli(p, 0.05, &mut rng).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn symmetric_gate_has_half_mean() {
        let mut rng = RandomStream::new(2, 0);
        let n = 10_000;
        for temperature in [0.05, 0.5, 2.0] {
            let d = RelaxedBernoulli { p: 0.5, temperature };
            let xs: Vec<f64> = (0..n).map(|_| d.value(rng.uniform())).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            assert!((m - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "{temperature}: {m}");
        }
    }

    #[test]
    fn cold_gate_matches_hard_probability() {
        let mut rng = RandomStream::new(3, 0);
        let n = 10_000;
        let d = RelaxedBernoulli { p: 0.3, temperature: 0.01 };
        let hits = (0..n).filter(|_| d.value(rng.uniform()) > 0.5).count() as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((hits - 0.3).abs() < 3.0 * se, "{hits}");
    }

    #[test]
    fn relaxed_and_hard_gates_agree_on_threshold() {
        let mut rng = RandomStream::new(4, 0);
        for _ in 0..1000 {
            let (p, u) = (rng.uniform(), rng.uniform());
            let d = RelaxedBernoulli { p, temperature: 0.05 };
            assert_eq!(d.value(u) > 0.5, hard_bernoulli(p, u), "p={p} u={u}");
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let u = [0.37, 0.81, 0.12];
        for temperature in [0.05, 0.5] {
            let report = grad_check(
                |t, p| {
                    let b = relaxed_bernoulli(p, &u, temperature)?;
                    Ok(b.mul(t.constant(Tensor::vector(&[1.0, -2.0, 0.5]))).sum())
                },
                &Tensor::vector(&[0.4, 0.55, 0.7]),
                1e-7,
            )
            .unwrap();
            assert!(report.passes(1e-6), "{temperature}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn gate_rejects_bad_probability() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(1.5));
        assert!(relaxed_bernoulli(p, &[0.5], 0.05).is_err());
        let p = tape.leaf(Tensor::scalar(0.5));
        assert!(relaxed_bernoulli(p, &[0.5], 0.0).is_err());
    }

    fn frequencies(w: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RandomStream::new(seed, 7);
        let mut counts = vec![0usize; w.len()];
        for _ in 0..n {
            let tape = Tape::new();
            let wl = tape.leaf(Tensor::vector(w));
            let (x, k) = sample_gumbel_softmax_st(wl, GumbelSoftmaxST::default(), &mut rng).unwrap();
            let xv = x.tensor();
            assert_eq!(xv.data()[k], 1.0);
            assert_eq!(xv.sum(), 1.0);
            assert_eq!(xv.data().iter().filter(|&&v| v == 0.0).count(), w.len() - 1);
            counts[k] += 1;
        }
        counts.into_iter().map(|c| c as f64 / n as f64).collect()
    }

    #[test]
    fn gumbel_uniform_weights() {
        let n = 30_000;
        let f = frequencies(&[0.0, 0.0, 0.0], n, 5);
        let se = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        for v in f {
            assert!((v - 1.0 / 3.0).abs() < 3.0 * se, "{v}");
        }
    }

    #[test]
    fn gumbel_skewed_weights() {
        let n = 30_000;
        let f = frequencies(&[2f64.ln(), 0.0, 0.0], n, 6);
        for (v, p) in f.iter().zip([0.5, 0.25, 0.25]) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((v - p).abs() < 3.0 * se, "{v} vs {p}");
        }
    }

    #[test]
    fn gumbel_backward_is_softmax_jacobian() {
        let g = [0.3, -0.2, 1.1];
        let report = grad_check(
            |t, w| {
                let (x, _) = gumbel_softmax_st(w, &g, 0.5)?;
                Ok(x.mul(t.constant(Tensor::vector(&[1.0, 2.0, -1.0]))).sum())
            },
            &Tensor::vector(&[0.0, 0.5, -0.5]),
            1e-5,
        )
        .unwrap();
        // The forward value is piecewise constant, so finite differences see 0
        // while the straight-through backward does not.
        assert!(report.numeric.data().iter().all(|v| *v == 0.0));
        let soft = softmax(&[0.3 / 0.5, 0.3 / 0.5, 0.6 / 0.5]);
        let c = [1.0, 2.0, -1.0];
        let dot: f64 = soft.iter().zip(c).map(|(a, b)| a * b).sum();
        for i in 0..3 {
            let expect = soft[i] * (c[i] - dot) / 0.5;
            assert!((report.analytic.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_rejects_non_finite_weights() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(&[0.0, f64::NAN]));
        assert!(matches!(
            gumbel_softmax_st(w, &[0.0, 0.0], 0.5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn enumeration_closed_forms() {
        let g = enumerated_categorical_gradient(linear_objective(&[1.0, 0.0]), &[0.0, 0.0]).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
        let g = enumerated_categorical_gradient(|t, _| Ok(t.scalar(4.0)), &[0.3, -1.0, 2.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn enumeration_matches_finite_differences() {
        let mut rng = RandomStream::new(8, 0);
        let f = rng.normals(3);
        let w = rng.normals(3);
        let g = enumerated_gradient(&f, &w);
        let expect = |w: &Tensor| softmax(w.data()).iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
        let fd = crate::autodiff::central_difference(expect, &Tensor::vector(&w), 1e-5);
        for (a, b) in g.iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_objective_gives_zero() {
        let mut rng = RandomStream::new(9, 0);
        let cfg = RelaxConfig::default();
        for _ in 0..10_000 {
            let s = relax_gradient(
                |t, _| Ok(t.scalar(5.0)),
                &[0.2, -0.3, 0.1],
                GumbelSoftmaxST::default(),
                &cfg,
                None,
                &mut rng,
            )
            .unwrap();
            assert!(s.gradient.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut rng = RandomStream::new(10, 0);
        let r = relax_gradient(
            |t, x| Ok(x.sum().mul(t.scalar(f64::INFINITY))),
            &[0.0, 0.0],
            GumbelSoftmaxST::default(),
            &RelaxConfig::default(),
            None,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn conditional_sample_is_consistent_with_choice() {
        let mut rng = RandomStream::new(11, 0);
        let w = [0.4, -0.7, 1.2, 0.0];
        for _ in 0..500 {
            let noise = RelaxNoise::draw(4, &mut rng);
            let k = noise.choice(&w);
            let tape = Tape::new();
            let u = conditional_relaxed_point(tape.leaf(Tensor::vector(&w)), k, &noise, 0.5).tensor();
            let best = argmax(u.data());
            assert_eq!(best, k);
        }
    }

    #[test]
    fn saturated_logits_keep_finite_gradients() {
        let mut rng = RandomStream::new(13, 0);
        let w = [251.0, -125.0, -125.0];
        for _ in 0..50 {
            let noise = RelaxNoise::draw(3, &mut rng);
            for k in 0..3 {
                let tape = Tape::new();
                let wl = tape.leaf(Tensor::vector(&w));
                let u = conditional_relaxed_point(wl, k, &noise, 0.5);
                let s = u.mul(tape.constant(Tensor::vector(&[0.7, -0.2, 1.3]))).sum();
                let gw = tape.backward(s).unwrap().wrt(wl);
                assert!(u.tensor().is_finite() && gw.is_finite(), "k {k}: {gw:?}");
                let t = conditional_point_tangent(&w, k, &noise, u.tensor().data(), &[1.0, 0.0, -1.0], 0.5);
                assert!(t.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn conditional_tangent_matches_autodiff() {
        let mut rng = RandomStream::new(12, 0);
        let w = [0.4, -0.7, 1.2];
        let noise = RelaxNoise::draw(3, &mut rng);
        let k = noise.choice(&w);
        let dir = [0.3, -1.0, 0.5];
        let coef = [0.7, -0.2, 1.3];
        let tape = Tape::new();
        let wl = tape.leaf(Tensor::vector(&w));
        let u = conditional_relaxed_point(wl, k, &noise, 0.5);
        let s = u.mul(tape.constant(Tensor::vector(&coef))).sum();
        let gw = tape.backward(s).unwrap().wrt(wl);
        let lhs: f64 = gw.data().iter().zip(dir).map(|(a, b)| a * b).sum();
        let tan = conditional_point_tangent(&w, k, &noise, u.tensor().data(), &dir, 0.5);
        let rhs: f64 = tan.iter().zip(coef).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");

        let tape = Tape::new();
        let wl = tape.leaf(Tensor::vector(&w));
        let u = relaxed_point(wl, &noise, 0.5);
        let s = u.mul(tape.constant(Tensor::vector(&coef))).sum();
        let gw = tape.backward(s).unwrap().wrt(wl);
        let lhs: f64 = gw.data().iter().zip(dir).map(|(a, b)| a * b).sum();
        let tan = relaxed_point_tangent(u.tensor().data(), &dir, 0.5);
        let rhs: f64 = tan.iter().zip(coef).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn estimate_with(critic: &Critic, w: &[f64], noise: &RelaxNoise, f: &[f64]) -> Vec<f64> {
        let k = noise.choice(w);
        let surrogate = |build: &dyn Fn(Var<'_>) -> Var<'_>| {
            let tape = Tape::new();
            let wl = tape.leaf(Tensor::vector(w));
            let u = build(wl);
            let c = critic.eval(u);
            (c.item(), tape.backward(c).unwrap().wrt(wl).into_data())
        };
        let (_, gz) = surrogate(&|wl| relaxed_point(wl, noise, 0.5));
        let (ct, gt) = surrogate(&|wl| conditional_relaxed_point(wl, k, noise, 0.5));
        relax_combine(w, k, f[k], ct, &gz, &gt)
    }

    #[test]
    fn critic_variance_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(13, 0);
        let w = [0.2, -0.4, 0.9];
        let f = [1.0, -1.0, 0.5];
        let critic = Critic::new(3, 4, 0.1, &mut rng);
        let noise = RelaxNoise::draw(3, &mut rng);
        let k = noise.choice(&w);
        let est = estimate_with(&critic, &w, &noise, &f);
        let tape = Tape::new();
        let u = relaxed_point(tape.leaf(Tensor::vector(&w)), &noise, 0.5).tensor();
        let ut = conditional_relaxed_point(tape.leaf(Tensor::vector(&w)), k, &noise, 0.5).tensor();
        let g = critic_variance_grad(&critic, &w, k, &noise, u.data(), ut.data(), &est, 0.5);
        let sq = |c: &Critic| estimate_with(c, &w, &noise, &f).iter().map(|v| v * v).sum::<f64>();
        let h = 1e-6;
        let fd = |perturb: &dyn Fn(&mut Critic, f64)| {
            let mut a = critic.clone();
            perturb(&mut a, h);
            let mut b = critic.clone();
            perturb(&mut b, -h);
            (sq(&a) - sq(&b)) / (2.0 * h)
        };
        for i in 0..critic.a_mat.numel() {
            let n = fd(&|c: &mut Critic, d| c.a_mat.data_mut()[i] += d);
            assert!((n - g.a_mat.data()[i]).abs() < 1e-6 * (1.0 + n.abs()), "A[{i}] {n} vs {}", g.a_mat.data()[i]);
        }
        for i in 0..critic.width() {
            let n = fd(&|c: &mut Critic, d| c.a_bias.data_mut()[i] += d);
            assert!((n - g.a_bias.data()[i]).abs() < 1e-6 * (1.0 + n.abs()));
            let n = fd(&|c: &mut Critic, d| c.v.data_mut()[i] += d);
            assert!((n - g.v.data()[i]).abs() < 1e-6 * (1.0 + n.abs()));
        }
        let n = fd(&|c: &mut Critic, d| c.bias += d);
        assert!((n - g.bias).abs() < 1e-6 * (1.0 + n.abs()));
    }

    #[test]
    fn critic_estimator_is_unbiased() {
        let mut rng = RandomStream::new(14, 0);
        let w = [0.3, -0.2, 0.0];
        let cfg = RelaxConfig {
            surrogate: Surrogate::Critic,
            ..RelaxConfig::default()
        };
        let mut critic = Critic::new(3, 16, cfg.critic_lr, &mut rng);
        let n = 20_000;
        let mut samples = vec![Vec::with_capacity(n); 3];
        for _ in 0..n {
            let s = relax_gradient(
                linear_objective(&[1.0, -1.0, 0.5]),
                &w,
                GumbelSoftmaxST::default(),
                &cfg,
                Some(&mut critic),
                &mut rng,
            )
            .unwrap();
            for i in 0..3 {
                samples[i].push(s.gradient[i]);
            }
        }
        let exact = enumerated_gradient(&[1.0, -1.0, 0.5], &w);
        for i in 0..3 {
            let (m, se) = mean_and_se(&samples[i]);
            assert!((m - exact[i]).abs() < 3.0 * se, "{i}: {m} vs {} (se {se})", exact[i]);
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let draw = || {
            let mut rng = RandomStream::new(15, 3);
            (0..5)
                .map(|_| {
                    relax_gradient(
                        linear_objective(&[1.0, -1.0, 0.5]),
                        &[0.1, 0.2, 0.3],
                        GumbelSoftmaxST::default(),
                        &RelaxConfig::default(),
                        None,
                        &mut rng,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn outcome_form_matches_full_estimator() {
        let w = [0.3, -0.2, 0.1, 0.0];
        const F: [f64; 4] = [1.0, -1.0, 0.5, 2.0];
        let f = &F;
        let cfg = RelaxConfig {
            surrogate: Surrogate::Critic,
            ..RelaxConfig::default()
        };
        let mut c1 = Critic::new(4, 8, 1e-2, &mut RandomStream::new(3, 0));
        let mut c2 = c1.clone();
        let mut rng = RandomStream::new(4, 0);
        let full = relax_gradient(linear_objective(f), &w, GumbelSoftmaxST::default(), &cfg, Some(&mut c1), &mut rng)
            .unwrap();
        let mut rng = RandomStream::new(4, 0);
        let noise = RelaxNoise::draw(4, &mut rng);
        let k = noise.choice(&w);
        let g = relax_with_critic(&w, &noise, f[k], &mut c2, GUMBEL_TEMPERATURE, true).unwrap();
        assert_eq!(k, full.choice);
        for (a, b) in g.iter().zip(&full.gradient) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c1, c2);
    }
}
