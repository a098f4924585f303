//! Linear-phase FIR design (Hamming-windowed sinc) and zero-phase filtering.

use std::f64::consts::PI;

/// Smallest odd integer at or above `n`.
pub fn odd_length(n: f64) -> usize {
    let k = n.ceil().max(1.0) as usize;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc lowpass with cutoff `cutoff_hz`; odd `n_taps`, unit DC gain.
pub fn lowpass_taps(cutoff_hz: f64, sfreq: f64, n_taps: usize) -> Vec<f64> {
    assert!(n_taps % 2 == 1, "filter length must be odd");
    let nyq = sfreq / 2.0;
    if cutoff_hz <= 0.0 {
        return vec![0.0; n_taps];
    }
    let m = (n_taps - 1) / 2;
    if cutoff_hz >= nyq {
        let mut d = vec![0.0; n_taps];
        d[m] = 1.0;
        return d;
    }
    let fc = cutoff_hz / sfreq;
    let w = hamming(n_taps);
    let mut h: Vec<f64> = (0..n_taps)
        .map(|i| 2.0 * fc * sinc(2.0 * fc * (i as f64 - m as f64)) * w[i])
        .collect();
    let s: f64 = h.iter().sum();
    for v in &mut h {
        *v /= s;
    }
    h
}

/// Band-stop between `lo_hz` and `hi_hz` as identity minus a band-pass.
pub fn bandstop_taps(lo_hz: f64, hi_hz: f64, sfreq: f64, n_taps: usize) -> Vec<f64> {
    let m = (n_taps - 1) / 2;
    let hi = lowpass_taps(hi_hz, sfreq, n_taps);
    let lo = lowpass_taps(lo_hz, sfreq, n_taps);
    let mut h: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| b - a).collect();
    h[m] += 1.0;
    h
}

/// Symmetric FIR applied forward and backward (centred, twice) after reflect
/// padding, so the overall response has zero phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroPhaseFir {
    taps: Vec<f64>,
}

impl ZeroPhaseFir {
    pub fn new(taps: Vec<f64>) -> Self {
        assert!(taps.len() % 2 == 1, "filter length must be odd");
        let n = taps.len();
        for i in 0..n / 2 {
            assert!(
                (taps[i] - taps[n - 1 - i]).abs() <= 1e-12 * (1.0 + taps[i].abs()),
                "taps must be symmetric"
            );
        }
        Self { taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    fn pad(&self, t: usize) -> usize {
        self.taps.len().min(t.saturating_sub(1))
    }

    fn centred(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let k = self.taps.len();
        let m = (k - 1) / 2;
        let mut y = vec![0.0; n];
        for (j, &h) in self.taps.iter().enumerate() {
            // y[i] += h * x[i + j - m]
            let shift = j as isize - m as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((n as isize - shift).max(0) as usize).min(n);
            if lo >= hi {
                continue;
            }
            let xs = (lo as isize + shift) as usize;
            for (d, &v) in y[lo..hi].iter_mut().zip(&x[xs..xs + (hi - lo)]) {
                *d += h * v;
            }
        }
        y
    }

    fn reflect_index(i: isize, n: usize) -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let t = x.len();
        let p = self.pad(t);
        let xp: Vec<f64> = (0..t + 2 * p)
            .map(|i| x[Self::reflect_index(i as isize - p as isize, t)])
            .collect();
        let y = self.centred(&self.centred(&xp));
        y[p..p + t].to_vec()
    }

    /// Transpose of [`ZeroPhaseFir::apply`].
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let t = g.len();
        let p = self.pad(t);
        let mut gp = vec![0.0; t + 2 * p];
        gp[p..p + t].copy_from_slice(g);
        let gp = self.centred(&self.centred(&gp));
        let mut out = vec![0.0; t];
        for (i, &v) in gp.iter().enumerate() {
            out[Self::reflect_index(i as isize - p as isize, t)] += v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    #[test]
    fn lowpass_has_unit_dc_gain_and_symmetry() {
        let h = lowpass_taps(30.0, 128.0, odd_length(3.3 * 128.0 / 7.0));
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = h.len();
        for i in 0..n {
            assert!((h[i] - h[n - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = RandomStream::new(3, 0);
        let f = ZeroPhaseFir::new(bandstop_taps(10.0, 12.0, 128.0, 129));
        for t in [40, 300] {
            let x = rng.normals(t);
            let g = rng.normals(t);
            let lhs: f64 = f.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(f.adjoint(&g)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn identity_taps_pass_through() {
        let f = ZeroPhaseFir::new(vec![0.0, 1.0, 0.0]);
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(f.apply(&x), x.to_vec());
    }
}
