//! Hybrid-regressive translation at desk scale.
//!
//! One shared transformer decoder runs in two self-attention modes: causal
//! for the sparse autoregressive pass and unmasked for the one-shot fill.
//! The crate covers the whole pipeline: a minimal autodiff tensor core, the
//! dual-mode model, four-task curriculum training with mixed distillation,
//! two-stage decoding, mask-predict refinement, synthetic masking
//! experiments, and an acceleration-robustness benchmark.

pub mod bench;
pub mod corpus;
pub mod decode;
pub mod elem;
pub mod error;
pub mod kernels;
pub mod masking;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use elem::Elem;
pub use error::{Error, Result};
