//! Multiscale neural operator (MNO) for flow-field prediction on
//! unstructured 3D point clouds.
//!
//! The crate is organized around a small tape-based reverse-mode
//! differentiation engine ([`tape`]), shared neural primitives ([`nn`]),
//! the AdamW optimizer and one-cycle schedule ([`optim`]), point-cloud
//! geometry and exact k-NN graphs ([`geometry`]), the three-scale MNO
//! architecture ([`model`]), the training/evaluation/ablation harness
//! ([`train`]), synthetic analytic flow generators ([`datagen`]), and the
//! binary file formats ([`io`]).

pub mod bench;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;
