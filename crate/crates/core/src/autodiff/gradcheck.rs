use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of comparing reverse-mode and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |g_ad - g_fd| / max(1, |g_fd|)`; infinite when anything was non-finite.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// False when the function or either gradient produced a non-finite value.
    pub finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Checks the gradient of a scalar function of one leaf against central
/// differences with step `h`. `f` must be deterministic in `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    let f0 = root.item();
    let analytic = tape.backward(root)?.wrt(leaf);
    let eval = |p: &Tensor| -> f64 {
        let t = Tape::new();
        let v = t.constant(p.clone());
        match f(&t, v) {
            Ok(r) => r.item(),
            Err(_) => f64::NAN,
        }
    };
    let numeric = central_difference(eval, x, h);
    let finite = f0.is_finite() && analytic.is_finite() && numeric.is_finite();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = (a - n).abs() / n.abs().max(1.0);
        if e > max_rel_error || e.is_nan() {
            max_rel_error = e;
            worst_index = i;
        }
    }
    if !finite {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        finite,
    })
}
