//! A small laboratory for input-layer adaptation of a frozen transformer:
//! soft prompt tuning, decomposed prompt tuning with position-indexed
//! low-rank offsets, and adaptive prompt tuning with a token-wise offset
//! network, together with the attention decompositions and probes used to
//! compare them.
//!
//! All numeric code is generic over [`Scalar`]; the `*64` aliases below are
//! what the training harness and the command-line tool use.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autograd::Tensor<f64>;
pub type Tensor32 = autograd::Tensor<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Backbone64 = backbone::BackboneModel<f64>;
pub type Method64 = peft::PeftMethod<f64>;
