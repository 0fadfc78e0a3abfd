//! Dataset distillation for single-image super-resolution.
//!
//! The crate is organized as a pipeline:
//!
//! * [`data_prep`] ingests HR corpora, derives bicubic LR counterparts,
//!   cuts overlapping sub-images, assigns pseudo-labels, and persists
//!   dataset artifacts.
//! * [`models`] holds the SRCNN/VDSR/EDSR family, the training loop, and
//!   flat-gradient access.
//! * [`metrics`] computes PSNR/SSIM plus a pluggable perceptual slot.
//! * [`pixel_distill`] optimizes synthetic HR images per pseudo-label by
//!   matching SR-loss gradients against real batches.
//! * [`latent_distill`] does the same in the latent space of a pluggable
//!   generator, initialized by inversion with pivotal tuning.
//! * [`harness`] runs the experiment grid and emits reports.
//!
//! Everything differentiable runs on the [`graph`] tape, whose backward
//! pass is itself built from taped primitives so that matching losses can
//! be differentiated with respect to synthetic pixels and latent codes.

pub mod data_prep;
pub mod error;
pub mod graph;
pub mod harness;
pub mod image_tensor;
pub mod latent_distill;
pub mod matching;
pub mod metrics;
pub mod models;
pub mod pixel_distill;
pub mod resize;
pub mod rng;

pub use error::{Result, SrError};
pub use image_tensor::ImageTensor;
