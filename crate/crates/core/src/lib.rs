//! Single-image motion deblurring on an image pyramid.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense NCHW tensors with reverse-mode autodiff and the
//!   numeric kernels (convolution, batch norm, block-average downsampling,
//!   ReLU, squared-error losses).
//! * [`net`] — the three-subgraph pyramid network, its layer table, and
//!   parameter management.
//! * [`optim`] / [`train`] — Adam, the step-decay learning-rate schedule,
//!   and the training loop with CSV logging and checkpoint/resume.
//! * [`checkpoint`] — versioned binary snapshots (parameters, batch-norm
//!   buffers, optimizer state, RNG position).
//! * [`image_buf`] — 8-bit sRGB I/O and the linear-light working format.
//! * [`dataset`] — blurry/sharp pair synthesis: frame averaging with
//!   optical-flow gating, and synthetic blur kernels.
//! * [`eval`] — PSNR, batch evaluation, whole-image inference, and the
//!   residual-vs-blur-size analysis.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod image_buf;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{deblur, evaluate, psnr, psnr_data, residual_analysis, Psnr};
pub use image_buf::ImageBuf;
pub use net::{DeblurNet, LossBreakdown, PyramidOutput};
pub use tensor::{ConvSpec, Dtype, Reduction, Scalar, Tensor};
