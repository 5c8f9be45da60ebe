//! Desk-scale online video instance segmentation.
//!
//! A from-scratch implementation of an online VIS architecture: a deformable
//! encoder, a memory-augmented decoder, prior propagation of instance queries,
//! reference points and class distributions across frames, and temporal
//! contrastive training. Everything runs on a small tape-based autodiff tensor
//! core with a finite-difference verification harness, trained and evaluated
//! on a synthetic occlusion-video generator.

pub mod error;
pub mod tensor;

pub mod attention;
pub mod memory;
pub mod nn;
pub mod propagation;

pub mod losses;
pub mod model;

pub mod evalkit;
pub mod synthdata;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
