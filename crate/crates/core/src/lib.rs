//! Concept extraction for clinical-style text: subword-level sequence labeling
//! with cross-sentence context, a linear-chain CRF output layer, random-split
//! ensembling, domain-adaptive masked language modeling and cross-task transfer.
//!
//! The numeric core is generic over the scalar type via [`scalar::Scalar`];
//! CRF dynamic programming always runs in 64-bit log space regardless of the
//! model precision. The concrete pipeline types used by the CLI are the
//! [`Tagger32`] / [`Encoder32`] aliases below, whose parameters match the
//! 32-bit checkpoint container bit for bit.

pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod ensemble;
pub mod eval;
pub mod scalar;
pub mod subword;
pub mod synthetic;
pub mod tagger;
pub mod train;
pub mod transfer;

pub use scalar::Scalar;

/// Pipeline encoder: 32-bit parameters, matching the checkpoint payload.
pub type Encoder32 = encoder::EncoderModel<f32>;
/// Double-precision encoder, used by the gradient oracles.
pub type Encoder64 = encoder::EncoderModel<f64>;
/// Pipeline tagger (encoder plus CRF head) at 32-bit parameter precision.
pub type Tagger32 = tagger::Tagger<f32>;
/// Double-precision tagger for the finite-difference oracles.
pub type Tagger64 = tagger::Tagger<f64>;
