//! Cross-domain shape detection at desk scale: a miniature two-stage detector
//! trained adversarially against a hierarchy of patch-based and instance-based
//! domain classifiers through gradient-reversal layers, on a synthetic
//! clean-to-fog benchmark.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`autodiff`] — reverse-mode automatic differentiation over dense tensors,
//!   including the gradient-reversal node.
//! - [`optim`] — parameters, SGD with momentum/weight decay, gradient clipping.
//! - [`checkpoint`] — flat binary parameter serialization.
//! - [`data`] — deterministic synthetic scene generation with a controllable
//!   fog-based domain shift.
//! - [`detector`] — backbone, RPN, ROI pooling, detection heads and losses.
//! - [`adaptation`] — multi-level patch classifiers, instance classifier,
//!   consistency regularizer.
//! - [`train`] — the paired-domain optimization loop and the ablation driver.
//! - [`eval`] — IoU, average precision, mAP@0.5, feature export.

pub mod adaptation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
