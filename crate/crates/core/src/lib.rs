//! Checkpoint selection and trigger-aware quantization for repositories of
//! personalized text-to-image checkpoints.
//!
//! The crate covers three concerns:
//!
//! * picking the checkpoint a request means ([`retrieval`], [`selection`]),
//! * simulating low-bit cross-attention that keeps trigger tokens in full
//!   precision ([`quantizers`], [`attention`], [`sensitivity`]),
//! * accounting for what that saves ([`budget`]).
//!
//! [`synth`] and [`bench`] generate the synthetic repository and prompt
//! benchmark used to evaluate the selection pipeline.

pub mod attention;
pub mod bench;
pub mod budget;
pub mod error;
pub mod numerics;
pub mod par;
pub mod quantizers;
pub mod registry;
pub mod retrieval;
pub mod selection;
pub mod sensitivity;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
