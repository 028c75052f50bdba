//! Depthwise quantization of feature tensors.
//!
//! The crate provides dense tensors with axis decomposition ([`tensor`]),
//! codebooks and the VQ/DQ operators ([`quantizer`]), plug-in entropy and
//! mutual-information estimators ([`info`]), a small reverse-mode
//! differentiation engine with the layers needed for training
//! ([`autodiff`], [`nn`], [`optim`]), the hierarchical depthwise quantized
//! autoencoder ([`dqae`]), synthetic data ([`synth`]) and the binary file
//! formats ([`format`]).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dqae;
pub mod error;
pub mod format;
pub mod info;
pub mod nn;
pub mod optim;
pub mod quantizer;
pub mod synth;
pub mod tensor;

pub use error::{DqError, Result};
pub use tensor::{decompose, positions_as_vectors, reassemble, vectors_to_positions, AxisDecomposition, NdTensor};
