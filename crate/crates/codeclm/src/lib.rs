//! Instruction-conditioned codec-token language model over a synthetic,
//! oracle-verifiable token world.
//!
//! The crate is organized as a pipeline:
//!
//! * [`toyworld`] — the deterministic synthetic universe: instruction
//!   sampling, ground-truth semantic/acoustic token oracles, and oracle
//!   decoders for content, attributes, and speaker identity.
//! * [`seqlayout`] — vocabularies, special ids, dedup, and assembly of
//!   autoregressive / non-autoregressive training examples.
//! * [`neuralcore`] — dense tensors, reverse-mode differentiation, the
//!   transformer block (RMSNorm, SwiGLU, RoPE attention), low-rank
//!   adapters, and a finite-difference gradient checker.
//! * [`models`] — the instruction encoder, the causal decoder over the
//!   unified vocabulary, and the non-causal residual-layer model.
//! * [`trainer`] — optimization, schedules, the phase curriculum, and
//!   checkpoint persistence.
//! * [`sampler`] — inference: multi-strength classifier-free guidance,
//!   autoregressive generation, and iterative parallel decoding.
//! * [`evalkit`] — token-level error rate, attribute accuracy, speaker
//!   similarity, and report generation.

pub mod error;
pub mod evalkit;
pub mod models;
pub mod neuralcore;
pub mod sampler;
pub mod seqlayout;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
