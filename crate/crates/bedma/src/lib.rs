//! Probabilistic sequence-to-sequence forecasting for univariate time
//! series.
//!
//! The library trains encoder-decoder recurrent models that read a
//! fixed window of past values and emit several future steps in one
//! shot. Four variants share one skeleton: with or without multi-head
//! additive attention between encoder and decoder, and with point
//! weights or an independent Gaussian posterior per weight. Sampling
//! the posterior members repeatedly turns a forecast into a
//! distribution, so each prediction carries its own uncertainty band.
//!
//! Everything runs on a from-scratch reverse-mode gradient tape over
//! dense `f64` tensors; there are no native or GPU dependencies.
//!
//! The stack, bottom up:
//!
//! - [`autodiff`]: tensors, the tape, and backpropagation.
//! - [`variational`]: Gaussian weight posteriors, reparameterized
//!   sampling, and divergence terms.
//! - [`recurrent`]: gated recurrent cells in point and variational
//!   flavours.
//! - [`attention`]: additive attention and its multi-head form.
//! - [`model`]: the four assembled variants plus checkpointing.
//! - [`data`]: series loading, imputation, normalization, windowing.
//! - [`training`]: the combined objective, Adam, early stopping.
//! - [`metrics`]: error and correlation scores with report rendering.
//! - [`check`]: finite-difference verification of every gradient.
//!
//! # Example
//!
//! ```
//! use bedma::{build_model, ModelConfig, Variant};
//!
//! let cfg = ModelConfig {
//!     hidden: 8,
//!     ..ModelConfig::new(Variant::Bedma, 12, 6)
//! };
//! let model = build_model(&cfg, 42).unwrap();
//!
//! let window = model.input_window(&vec![0.5; 12]).unwrap();
//! let forecast = model.predict_mc(&window, 30, 7).unwrap();
//! assert_eq!(forecast.mean.len(), 6);
//! ```

pub mod autodiff;
pub mod attention;
pub mod check;
pub mod data;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod training;
pub mod variational;

pub use autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
pub use model::{build_model, Model, ModelConfig, Variant};
