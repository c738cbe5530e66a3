//! Spatio-temporal self-similarity (STSS) blocks for video features.
//!
//! The crate is organised around the life of one feature tensor:
//!
//! * [`tensor`] — dense n-d arrays plus the handful of numeric ops everything
//!   else is built from (elementwise math, mode-n products, strided 3D
//!   convolution, softmax, bilinear resampling) and the `.vten` binary format.
//! * [`stss`] — the similarity transform itself: a 4D feature map `V` of shape
//!   `(T, X, Y, C)` becomes a 6D tensor `S` of shape `(T, X, Y, L, U, V)`
//!   holding local similarities over a temporal/spatial offset window.
//! * [`extraction`] — heads that turn the `(L, U, V)` volume of `S` into
//!   per-offset feature channels: soft-argmax, MLP, strided convolution.
//! * [`integration`] — spatio-temporal convolutions over `(t, x, y)`, the
//!   offset-axis flattening + projection, and the residual block wrapper.
//! * [`autodiff`] — a Wengert tape with backward rules for every op above,
//!   plus a finite-difference gradient checker.
//! * [`backbone`], [`data`], [`trainer`] — a tiny trainable video classifier
//!   hosting the block, a synthetic motion dataset whose labels depend only
//!   on motion, and an SGD training/evaluation loop.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod extraction;
pub mod integration;
pub mod scalar;
pub mod stss;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
