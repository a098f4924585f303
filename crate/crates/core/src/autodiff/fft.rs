use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse {
                    FftDirection::Inverse
                } else {
                    FftDirection::Forward
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

/// Unnormalised in-place transform of one contiguous signal.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    if buf.len() <= 1 {
        return;
    }
    plan(buf.len(), inverse).process(buf);
}

/// Forward DFT along the last axis (rows of length `n`), unnormalised.
pub fn fft_last_axis(data: &[Complex64], n: usize) -> Vec<Complex64> {
    transform_rows(data, n, false, 1.0)
}

/// Inverse DFT along the last axis, normalised by `1/n`.
pub fn ifft_last_axis(data: &[Complex64], n: usize) -> Vec<Complex64> {
    transform_rows(data, n, true, 1.0 / n as f64)
}

fn transform_rows(data: &[Complex64], n: usize, inverse: bool, scale: f64) -> Vec<Complex64> {
    assert!(n >= 2, "FFT axis length must be at least 2, got {n}");
    assert_eq!(data.len() % n, 0);
    let mut out = data.to_vec();
    let fft = plan(n, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for row in out.chunks_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    if scale != 1.0 {
        for z in &mut out {
            *z *= scale;
        }
    }
    out
}

/// Direct O(n^2) DFT; the reference the fast path is tested against.
pub fn dft_naive(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = sign * std::f64::consts::TAU * ((k * t) % n) as f64 / n as f64;
                acc += v * Complex64::new(ang.cos(), ang.sin());
            }
            if inverse {
                acc / n as f64
            } else {
                acc
            }
        })
        .collect()
}
