use std::f64::consts::{PI, TAU};

use rustfft::num_complex::Complex64;

use super::filter::{bandstop_taps, odd_length, ZeroPhaseFir};
use super::{n_positive_bins, AugContext, Mode, OpKind, OpNoise};
use crate::autodiff::{fft_last_axis, ifft_last_axis, Tensor, Var};
use crate::estimators::{hard_bernoulli, relaxed_bernoulli};
use crate::{Error, Result};

/// Upper end of the frequency-shift range at `mu = 1`.
pub const FREQ_SHIFT_MAX_HZ: f64 = 5.0;
/// Masked duration at `mu = 1`, in seconds.
pub const TIME_MASK_MAX_S: f64 = 1.0;
/// Steepness of the time-mask sigmoids, per second.
pub const MASK_STEEPNESS: f64 = 1000.0;
/// Noise standard deviation at `mu = 1`.
pub const NOISE_MAX_STD: f64 = 0.2;
/// Largest rotation angle at `mu = 1`.
pub const MAX_ROTATION_RAD: f64 = PI / 6.0;
/// Band-stop filter length, in seconds of samples.
pub const BANDSTOP_FILTER_SECONDS: f64 = 3.3;
const BANDSTOP_MAX_WIDTH_HZ: f64 = 2.0;
const NEAREST_SENSORS: usize = 4;

pub(super) fn transform<'t>(
    kind: OpKind,
    x: Var<'t>,
    mu: Var<'t>,
    noise: &OpNoise,
    mode: Mode,
    ctx: &AugContext<'_>,
) -> Result<Var<'t>> {
    match kind {
        OpKind::TimeReverse => Ok(x.reverse_last()),
        OpKind::SignFlip => Ok(x.neg()),
        OpKind::FtSurrogate => ft_surrogate(x, mu, noise),
        OpKind::FrequencyShift => frequency_shift(x, mu, noise, ctx),
        OpKind::Bandstop => bandstop(x, mu, noise, ctx),
        OpKind::TimeMask => time_mask(x, mu, noise, ctx),
        OpKind::GaussianNoise => gaussian_noise(x, mu, noise),
        OpKind::ChannelDropout => channel_dropout(x, mu, noise, mode, ctx),
        OpKind::ChannelShuffle => channel_shuffle(x, mu, noise, mode, ctx),
        OpKind::ChannelSymmetry => channel_symmetry(x, ctx),
        OpKind::RotationX => rotation(x, mu, noise, ctx, 0),
        OpKind::RotationY => rotation(x, mu, noise, ctx, 1),
        OpKind::RotationZ => rotation(x, mu, noise, ctx, 2),
    }
}

fn dims(x: Var<'_>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

fn check_noise(noise: &[f64], expect: usize, kind: &str) -> Result<()> {
    if noise.len() != expect {
        return Err(Error::contract(format!(
            "{kind} needs {expect} noise values, got {}",
            noise.len()
        )));
    }
    Ok(())
}

/// `mu` broadcast to `[B, C, T]`.
fn mu_field<'t>(mu: Var<'t>, b: usize, c: usize, t: usize) -> Var<'t> {
    mu.reshape(&[b, 1, 1]).broadcast_to(&[b, c, t])
}

fn ft_surrogate<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    let f = n_positive_bins(t);
    check_noise(&noise.values, b * c * f, "ft_surrogate")?;
    // Phase increments 2*pi*mu*u on positive bins, mirrored with opposite
    // sign on negative bins; DC and Nyquist untouched.
    let mut pattern = vec![0.0; b * c * t];
    for row in 0..b * c {
        for k in 1..=f {
            let phi = TAU * noise.values[row * f + k - 1];
            pattern[row * t + k] = phi;
            pattern[row * t + t - k] = -phi;
        }
    }
    let tape = x.tape();
    let phase = mu_field(mu, b, c, t).mul(tape.constant(Tensor::new(vec![b, c, t], pattern)?));
    let rot = Var::complex(phase.cos(), phase.sin());
    Ok(x.fft()?.cmul(rot).ifft()?.re())
}

/// Frequency-domain multiplier of the analytic signal: 1 at DC (and Nyquist
/// for even lengths), 2 on positive bins, 0 on negative bins.
fn analytic_multiplier(t: usize) -> Vec<f64> {
    let mut h = vec![0.0; t];
    h[0] = 1.0;
    let half = t / 2;
    if t % 2 == 0 {
        h[half] = 1.0;
        for v in h.iter_mut().take(half).skip(1) {
            *v = 2.0;
        }
    } else {
        for v in h.iter_mut().take(half + 1).skip(1) {
            *v = 2.0;
        }
    }
    h
}

/// `x + i H[x]` computed in the frequency domain.
pub fn analytic_signal(x: &[f64]) -> Result<Vec<Complex64>> {
    let t = x.len();
    if t < 2 {
        return Err(Error::contract("analytic signal needs at least two samples"));
    }
    let xc: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut spec = fft_last_axis(&xc, t);
    for (z, h) in spec.iter_mut().zip(analytic_multiplier(t)) {
        *z *= h;
    }
    Ok(ifft_last_axis(&spec, t))
}

fn frequency_shift<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise, ctx: &AugContext<'_>) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b, "frequency_shift")?;
    if FREQ_SHIFT_MAX_HZ >= ctx.sfreq / 2.0 {
        return Err(Error::contract(format!(
            "frequency shift up to {FREQ_SHIFT_MAX_HZ} Hz exceeds the Nyquist frequency {}",
            ctx.sfreq / 2.0
        )));
    }
    let tape = x.tape();
    let h = analytic_multiplier(t);
    let mut hfull = Vec::with_capacity(b * c * t);
    for _ in 0..b * c {
        hfull.extend(h.iter().map(|&v| Complex64::new(v, 0.0)));
    }
    let hmul = tape.complex_constant(crate::autodiff::ComplexTensor::new(vec![b, c, t], hfull)?);
    let xa = x.fft()?.cmul(hmul).ifft()?;
    // Phase 2*pi*(5*mu*u)*t.
    let mut pattern = vec![0.0; b * c * t];
    for bi in 0..b {
        let rate = TAU * FREQ_SHIFT_MAX_HZ * noise.values[bi] / ctx.sfreq;
        for ci in 0..c {
            for n in 0..t {
                pattern[(bi * c + ci) * t + n] = rate * n as f64;
            }
        }
    }
    let theta = mu_field(mu, b, c, t).mul(tape.constant(Tensor::new(vec![b, c, t], pattern)?));
    Ok(xa.re().mul(theta.cos()).sub(xa.im().mul(theta.sin())))
}

/// Zero-phase band-stop filter of width `2 mu` Hz centred at `u * Nyquist`,
/// or `None` for a degenerate band.
pub fn bandstop_filter(mu: f64, u: f64, sfreq: f64) -> Option<ZeroPhaseFir> {
    if mu <= 0.0 {
        return None;
    }
    let nyq = sfreq / 2.0;
    let centre = u * nyq;
    let half = 0.5 * BANDSTOP_MAX_WIDTH_HZ * mu;
    let lo = (centre - half).max(0.0);
    let hi = (centre + half).min(nyq);
    let n = odd_length(BANDSTOP_FILTER_SECONDS * sfreq);
    Some(ZeroPhaseFir::new(bandstop_taps(lo, hi, sfreq, n)))
}

fn bandstop<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise, ctx: &AugContext<'_>) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b, "bandstop")?;
    let mus = mu.tensor();
    let filters: Vec<Option<ZeroPhaseFir>> = (0..b)
        .map(|i| bandstop_filter(mus.data()[i], noise.values[i], ctx.sfreq))
        .collect();
    let xv = x.tensor();
    let mut out = xv.data().to_vec();
    for (bi, f) in filters.iter().enumerate() {
        if let Some(f) = f {
            for ci in 0..c {
                let r = (bi * c + ci) * t;
                let y = f.apply(&xv.data()[r..r + t]);
                out[r..r + t].copy_from_slice(&y);
            }
        }
    }
    let out = Tensor::new(vec![b, c, t], out)?;
    Ok(x.tape().custom(&[x], out, move |g, _| {
        let mut gx = g.data().to_vec();
        for (bi, f) in filters.iter().enumerate() {
            if let Some(f) = f {
                for ci in 0..c {
                    let r = (bi * c + ci) * t;
                    let y = f.adjoint(&g.data()[r..r + t]);
                    gx[r..r + t].copy_from_slice(&y);
                }
            }
        }
        vec![Tensor::from_parts(vec![b, c, t], gx)]
    }))
}

/// Multiplicative mask `1 - s(l (t - start)) s(-l (t - end))` for one window,
/// where the masked span `[start, end]` has length `dt` and starts at `u (T - dt)`.
pub fn time_mask_window(dt: f64, u: f64, t: usize, sfreq: f64) -> Vec<f64> {
    let dur = t as f64 / sfreq;
    let start = u * (dur - dt);
    let end = start + dt;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    (0..t)
        .map(|n| {
            let tn = n as f64 / sfreq;
            1.0 - sig(MASK_STEEPNESS * (tn - start)) * sig(-MASK_STEEPNESS * (tn - end))
        })
        .collect()
}

fn time_mask<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise, ctx: &AugContext<'_>) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b, "time_mask")?;
    let dur = t as f64 / ctx.sfreq;
    for &m in mu.tensor().data() {
        if m * TIME_MASK_MAX_S > dur {
            return Err(Error::contract(format!(
                "mask of {} s does not fit a {dur} s window",
                m * TIME_MASK_MAX_S
            )));
        }
    }
    let tape = x.tape();
    let u = &noise.values;
    // start = u (dur - dt), dt = mu * 1 s, so start = u dur - u dt.
    let dt = mu.scale(TIME_MASK_MAX_S);
    let start = dt
        .mul(tape.constant(Tensor::vector(&u.iter().map(|v| -v).collect::<Vec<_>>())))
        .add(tape.constant(Tensor::vector(&u.iter().map(|v| v * dur).collect::<Vec<_>>())));
    let end = start.add(dt);
    let times = tape.constant(Tensor::new(
        vec![1, t],
        (0..t).map(|n| n as f64 / ctx.sfreq).collect(),
    )?);
    let times = times.broadcast_to(&[b, t]);
    let rise = times
        .sub(start.reshape(&[b, 1]).broadcast_to(&[b, t]))
        .scale(MASK_STEEPNESS)
        .sigmoid();
    let fall = times
        .sub(end.reshape(&[b, 1]).broadcast_to(&[b, t]))
        .scale(-MASK_STEEPNESS)
        .sigmoid();
    let mask = rise.mul(fall).neg().add_scalar(1.0);
    Ok(x.mul(mask.reshape(&[b, 1, t]).broadcast_to(&[b, c, t])))
}

fn gaussian_noise<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b * c * t, "gaussian_noise")?;
    let z = x.tape().constant(Tensor::new(vec![b, c, t], noise.values.clone())?);
    Ok(x.add(mu_field(mu, b, c, t).scale(NOISE_MAX_STD).mul(z)))
}

/// Per-channel Bernoulli mask with probability `prob` (`[B]`) on `[B, C]`.
fn channel_mask<'t>(prob: Var<'t>, u: &[f64], c: usize, mode: Mode, ctx: &AugContext<'_>) -> Result<Var<'t>> {
    let b = prob.shape()[0];
    let pc = prob.reshape(&[b, 1]).broadcast_to(&[b, c]);
    match mode {
        Mode::Relaxed => relaxed_bernoulli(pc, u, ctx.temperature),
        Mode::Hard => {
            let pv = pc.tensor();
            let m = pv
                .data()
                .iter()
                .zip(u)
                .map(|(&p, &ui)| f64::from(u8::from(hard_bernoulli(p, ui))))
                .collect();
            Ok(prob.tape().constant(Tensor::new(vec![b, c], m)?))
        }
    }
}

fn channel_dropout<'t>(
    x: Var<'t>,
    mu: Var<'t>,
    noise: &OpNoise,
    mode: Mode,
    ctx: &AugContext<'_>,
) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b * c, "channel_dropout")?;
    let keep = mu.neg().add_scalar(1.0);
    let mask = channel_mask(keep, &noise.values, c, mode, ctx)?;
    Ok(x.mul(mask.reshape(&[b, c, 1]).broadcast_to(&[b, c, t])))
}

fn channel_shuffle<'t>(
    x: Var<'t>,
    mu: Var<'t>,
    noise: &OpNoise,
    mode: Mode,
    ctx: &AugContext<'_>,
) -> Result<Var<'t>> {
    let (b, c, t) = dims(x);
    check_noise(&noise.values, b * c, "channel_shuffle")?;
    check_noise(&noise.keys, b * c, "channel_shuffle keys")?;
    let sel = channel_mask(mu, &noise.values, c, mode, ctx)?;
    let sv = sel.tensor();
    let mut index: Vec<usize> = Vec::with_capacity(b * c);
    for bi in 0..b {
        let chosen: Vec<usize> = (0..c).filter(|&ci| sv.data()[bi * c + ci] > 0.5).collect();
        let mut order = chosen.clone();
        order.sort_by(|&i, &j| {
            noise.keys[bi * c + i]
                .partial_cmp(&noise.keys[bi * c + j])
                .unwrap()
                .then(i.cmp(&j))
        });
        let mut row: Vec<usize> = (0..c).collect();
        for (dst, src) in chosen.iter().zip(&order) {
            row[*dst] = *src;
        }
        index.extend(row);
    }
    // The permutation is a fixed index map; the gradient reaches mu through
    // the selection weights as if the permuted rows were constants.
    let permuted = x.gather_channels(&index, c);
    let s = sel.reshape(&[b, c, 1]).broadcast_to(&[b, c, t]);
    let stay = s.neg().add_scalar(1.0);
    Ok(s.mul(permuted).add(stay.mul(x)))
}

fn montage_for<'m>(ctx: &AugContext<'m>, c: usize) -> Result<&'m super::Montage> {
    let m = ctx
        .montage
        .ok_or_else(|| Error::contract("operation needs a montage"))?;
    if m.len() != c {
        return Err(Error::contract(format!(
            "montage has {} sensors but the signal has {c} channels",
            m.len()
        )));
    }
    Ok(m)
}

fn channel_symmetry<'t>(x: Var<'t>, ctx: &AugContext<'_>) -> Result<Var<'t>> {
    let (b, c, _) = dims(x);
    let m = montage_for(ctx, c)?;
    let row = m.mirror_index();
    let index: Vec<usize> = (0..b).flat_map(|_| row.iter().copied()).collect();
    Ok(x.gather_channels(&index, c))
}

fn rotation_matrix(axis: usize, psi: f64) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let (s, c) = psi.sin_cos();
    match axis {
        0 => (
            [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
        ),
        1 => (
            [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
        ),
        _ => (
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
        ),
    }
}

fn matvec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Interpolation matrix `W` (row-major `C x C`) mapping sensor signals to the
/// sensor positions rotated by `psi` about `axis` (0 = x, 1 = y, 2 = z), and
/// its derivative in `psi`.
///
/// Each output row uses inverse great-circle distances to the four nearest
/// sensors, normalised to sum to one; a row whose rotated position coincides
/// with a sensor copies that sensor.
pub fn rotation_weights(positions: &[[f64; 3]], axis: usize, psi: f64) -> (Vec<f64>, Vec<f64>) {
    let c = positions.len();
    let (r, dr) = rotation_matrix(axis, psi);
    let k = NEAREST_SENSORS.min(c);
    let mut w = vec![0.0; c * c];
    let mut dw = vec![0.0; c * c];
    for i in 0..c {
        let q = matvec(&r, &positions[i]);
        let dq = matvec(&dr, &positions[i]);
        let mut dist = Vec::with_capacity(c);
        for (j, pj) in positions.iter().enumerate() {
            // Great-circle distance from the chord, accurate near zero.
            let diff = [0, 1, 2].map(|a| q[a] - pj[a]);
            let chord = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = 2.0 * (0.5 * chord).min(1.0).asin();
            let dd = if chord > 0.0 && chord < 2.0 {
                let dchord = (0..3).map(|a| diff[a] * dq[a]).sum::<f64>() / chord;
                dchord / (1.0 - 0.25 * chord * chord).sqrt()
            } else {
                0.0
            };
            dist.push((d, dd, j));
        }
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.cmp(&b.2)));
        let near = &dist[..k];
        if near[0].0 < 1e-12 {
            w[i * c + near[0].2] = 1.0;
            continue;
        }
        let inv: Vec<f64> = near.iter().map(|n| 1.0 / n.0).collect();
        let dinv: Vec<f64> = near.iter().map(|n| -n.1 / (n.0 * n.0)).collect();
        let s: f64 = inv.iter().sum();
        let ds: f64 = dinv.iter().sum();
        for (m, n) in near.iter().enumerate() {
            w[i * c + n.2] = inv[m] / s;
            dw[i * c + n.2] = (dinv[m] * s - inv[m] * ds) / (s * s);
        }
    }
    (w, dw)
}

fn rotation<'t>(x: Var<'t>, mu: Var<'t>, noise: &OpNoise, ctx: &AugContext<'_>, axis: usize) -> Result<Var<'t>> {
    let (b, c, _) = dims(x);
    check_noise(&noise.values, b, "rotation")?;
    let m = montage_for(ctx, c)?;
    let positions = m.positions().to_vec();
    // psi = (pi/6) mu (2u - 1)
    let slope: Vec<f64> = noise.values.iter().map(|u| MAX_ROTATION_RAD * (2.0 * u - 1.0)).collect();
    let mus = mu.tensor();
    let mut wdata = Vec::with_capacity(b * c * c);
    let mut dwdata = Vec::with_capacity(b * c * c);
    for bi in 0..b {
        let (w, dw) = rotation_weights(&positions, axis, slope[bi] * mus.data()[bi]);
        wdata.extend(w);
        dwdata.extend(dw);
    }
    let weights = x.tape().custom(&[mu], Tensor::new(vec![b, c, c], wdata)?, move |g, _| {
        let gm = (0..b)
            .map(|bi| {
                let r = bi * c * c..(bi + 1) * c * c;
                let s: f64 = g.data()[r.clone()]
                    .iter()
                    .zip(&dwdata[r])
                    .map(|(a, d)| a * d)
                    .sum();
                s * slope[bi]
            })
            .collect::<Vec<_>>();
        vec![Tensor::from_parts(vec![b], gm)]
    });
    Ok(x.mix_channels(weights))
}
