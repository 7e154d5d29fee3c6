//! Region-ensemble convolutional regression for 3D joint localization from
//! single depth images.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`tensor`] — a deterministic, CPU-based reverse-mode autodiff engine
//!   providing exactly the operations the network architectures need.
//! * [`nn`] — layer compositions and the named architectures (shallow,
//!   basic, basic-residual) with single, region-ensemble, and
//!   region-bagging heads.
//! * [`geometry`] — camera model, metric-cube patch cropping, coordinate
//!   normalization with exact inverse, label-consistent augmentation.
//! * [`train`] — smooth-L1 / L2 losses, SGD with momentum and weight decay,
//!   step learning-rate schedule, deterministic training loop.
//! * [`eval`] — distance-error metrics, success-frame curves, fingertip
//!   precision, mAP, receptive-field analysis, multi-view and bagging
//!   inference baselines.
//! * [`data`] — on-disk formats (depth frames, manifests, checkpoints) and
//!   a synthetic articulated-hand depth generator for desk-scale runs.
//!
//! Everything is deterministic under a fixed [`rng::RngStream`] seed,
//! independent of thread count.

pub mod data;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::{Graph, TensorError, TensorRef};
