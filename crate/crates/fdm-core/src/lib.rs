//! Core library for the Fan Duality Model (FDM): a complex-valued linear
//! recurrent sequence model pairing a norm-preserving wave scan with a
//! constant-size local-global token cache, trained with a two-phase
//! freeze schedule and decoded with holographic reference beams.
//!
//! Layout:
//! - [`tape`], [`gradcheck`]: reverse-mode autodiff and its finite-difference oracle
//! - [`wave`]: Fan Operator recurrence, measurement schedule, two-pass Born scan
//! - [`cache`]: ring-buffer + top-k global-slot attention with O(W+K) state
//! - [`model`]: layer stack, parameter partition, batch forward and O(1) decode
//! - [`holo`]: reference-beam modulation and layer-wise beam training
//! - [`train`]: AdamW, Freeze-Scan schedule, LM/MQAR training loops
//! - [`mqar`], [`corpus`]: task generation and byte-level corpora
//! - [`oracles`]: independent reference implementations used by the test suites

pub mod baseline;
pub mod cache;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod holo;
pub mod kernels;
pub mod model;
pub mod mqar;
pub mod oracles;
pub mod params;
pub mod tape;
pub mod train;
pub mod wave;

pub use error::{FdmError, Result};
pub use model::{FdmModel, ModelConfig};
pub use params::{ParamId, ParamSet, ParamTag};
pub use tape::{Buf, DType, Tape, TensorId};
