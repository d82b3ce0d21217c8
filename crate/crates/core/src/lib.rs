//! HighDAN: high-resolution multimodal semantic segmentation with
//! adversarial domain adaptation, on the CPU, in f64.
//!
//! The crate is organised as a pipeline:
//!
//! * [`raster`] loads scene directories (multi-band f32 rasters plus a label
//!   plane), normalizes and PCA-reduces bands, cuts tiles, and can generate
//!   synthetic paired source/target scenes with a controlled domain shift.
//! * [`nn`] is a small reverse-mode autodiff engine over `ndarray` tensors;
//!   everything differentiable in the crate runs through it.
//! * [`encoder`], [`decoder`], [`adaptation`] build the segmentation network:
//!   per-modality feature heads feeding one shared high-resolution trunk,
//!   a convolutional decoder, and the two adversarial discriminators.
//! * [`losses`] and [`metrics`] hold the scalar math: cross-entropy plus Dice
//!   on the segmentation side, least-squares GAN terms on the adversarial
//!   side, and confusion-matrix metrics (OA, mIoU, mF1) for evaluation.
//! * [`trainer`] wires the above into the alternating update loop, handles
//!   checkpoints, and runs tiled whole-scene inference.
//! * [`cli`] exposes synth/train/eval/predict/params subcommands.

pub mod adaptation;
pub mod cli;
pub mod decoder;
pub mod encoder;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
