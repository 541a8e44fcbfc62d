//! Training and evaluation toolkit for pixelwise segmentation when part of the
//! training data only carries merged ("super") labels.
//!
//! The crate is organised bottom-up:
//!
//! - [`labelspace`]: label schemes, super labels and validity masks.
//! - [`tensor`]: dense tensors and stable softmax / log-sum-exp.
//! - [`losses`]: crossentropy, naive masking and super-label-aware crossentropy
//!   with analytic gradients and a finite-difference oracle.
//! - [`model`]: a small encoder–decoder network, Adam, training and checkpoints.
//! - [`synthdata`]: synthetic scenes, dataset splits and the HSEG1 file format.
//! - [`metrics`]: Dice, ASSD and Hausdorff distance, and per-arm reports.
//! - [`harness`]: the four-arm experiment and its comparison table.

pub mod harness;
pub mod labelspace;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod testkit;

pub use labelspace::{LabelId, LabelMap, LabelScheme, SuperLabel, ValidityMask};
pub use losses::{Batch, LossKind, LossResult, Reduction};
pub use metrics::ArmReport;
pub use model::{AdamState, SegModel, TrainConfig};
pub use tensor::Tensor;
