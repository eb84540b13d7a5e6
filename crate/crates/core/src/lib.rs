//! Core library for multimodal dataset fingerprinting.
//!
//! A dataset owner extracts a *fingerprint* from an image–caption corpus
//! without modifying it: a budget-bounded global perturbation trained against
//! a surrogate dual encoder, plus an adaptive textual prompt projected to
//! readable tokens. Whether a suspicious vision–language retrieval model was
//! trained on the corpus is then decided from its retrieval behaviour on
//! fingerprint queries.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats, CLI and
//! network plumbing live in the companion `mmfinger` crate.
//!
//! Pipeline overview:
//!
//! 1. [`corpus`] — corpus construction, synthesis, partitioning, pruning.
//! 2. [`encoders`] — the surrogate dual encoder and contrastive fine-tuning.
//! 3. [`gop`] — adversarial training of the global perturbation.
//! 4. [`prompt`] — aligned prompt learning and discrete projection.
//! 5. [`verify`] — retrieval queries, VSR/ΔR metrics and the ownership
//!    decision.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod encoders;
pub mod gop;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod verify;

mod math;

pub use corpus::{LabeledCorpus, MultimodalSample};
pub use encoders::{DualEncoder, EncoderArch, Tokenizer};
pub use gop::{GopArtifact, GopTrainConfig};
pub use prompt::{PromptConfig, PromptState};
pub use verify::{Thresholds, VerificationReport};
