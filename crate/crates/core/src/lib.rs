//! Differentiable data augmentation for multichannel time series.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small define-by-run reverse-mode tape over real and
//!   complex tensors, including FFTs.
//! - [`rng`]: counter-based random streams used by every sampler.
//! - [`estimators`]: relaxed Bernoulli gates, straight-through Gumbel-softmax
//!   and the RELAX gradient estimator.
//! - [`augment`]: the thirteen signal augmentations in hard and relaxed form.
//! - [`policy`]: stages, subpolicies, class-wise policies and their text format.
//! - [`model`]: the sleep-staging CNN, its trainer and metrics.
//! - [`search`]: bilevel (C)ADDA search plus random-search and density-matching
//!   baselines.
//! - [`data`]: dataset container, preprocessing, splits and the synthetic
//!   planted-invariance generator.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimators;
pub mod model;
pub mod policy;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
