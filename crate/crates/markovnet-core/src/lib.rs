//! Differential CSI feedback for massive MIMO at desk scale.
//!
//! The crate synthesizes time-correlated sparse channel sequences, compresses
//! each snapshot (or its temporal residual) through a small convolutional
//! autoencoder, quantizes the feedback codewords, reconstructs at the
//! receiver, and accounts for accuracy (NMSE), information content
//! (conditional entropy), and cost (parameters, FLOPs).
//!
//! All numerics are generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the concrete aliases below fix the default `f64`
//! precision used by the training pipelines.

pub mod channel;
pub mod codec;
pub mod entropy;
pub mod eval;
pub mod io;
pub mod markovnet;
pub mod metrics;
pub mod oracles;
pub mod quantizer;
pub mod scalar;
pub mod sphere;
pub mod tensor;
pub mod transform;

mod error;

pub use error::{Error, Result};

/// Default-precision dense tensor used by the pipelines.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision tensor, for storage-bound workloads.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default-precision autodiff tape.
pub type Tape = tensor::Tape<f64>;
/// Default-precision Adam optimizer state.
pub type AdamState = tensor::AdamState<f64>;
/// Default-precision channel dataset.
pub type CsiSequence = channel::CsiSequence<f64>;
/// Default-precision angular-delay snapshot.
pub type CsiMatrix = transform::CsiMatrix<f64>;
/// Default-precision encoder/decoder pair.
pub type CodecModel = codec::CodecModel<f64>;
/// Default-precision differential feedback pipeline.
pub type Pipeline = markovnet::MarkovNetPipeline<f64>;
