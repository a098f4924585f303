//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive applications as they are executed
//! (define-by-run). Every [`Var`] is a handle into one tape. Calling
//! [`Tape::backward`] on a scalar root walks the recorded nodes in reverse and
//! returns the gradient for every leaf created with [`Tape::leaf`].
//!
//! Complex-valued nodes carry gradients in the `dL/dRe + i dL/dIm`
//! convention, so the adjoint of a complex-linear map `A` is `A^H`.

mod conv;
mod fft;
mod gradcheck;
mod tape;
mod tensor;

pub use fft::{dft_naive, fft_inplace, fft_last_axis, ifft_last_axis};
pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ComplexTensor, Tensor};

pub use rustfft::num_complex::Complex64;
