//! Combination-aware low-rank adaptation for incomplete multimodal learning.
//!
//! A frozen multimodal base model is adapted with per-modality low-rank
//! adapters: one private adapter for every modality combination a modality
//! can appear in, plus one shared adapter. Private and shared outputs are
//! decoupled by a cosine-based orthogonality loss, and the sampling
//! probability of each combination during fine-tuning is re-balanced every
//! epoch from how quickly its private and shared representations separate.
//!
//! Module map:
//!
//! * [`tensor`], [`tape`], [`func`], [`rng`]: numeric core with reverse-mode
//!   differentiation;
//! * [`synth`]: synthetic datasets and missing-modality protocols;
//! * [`model`]: encoders, adapter banks, fusion and heads;
//! * [`losses`]: orthogonality, task and total losses;
//! * [`dpft`]: separability scores and the combination schedule;
//! * [`trainer`], [`metrics`]: training phases and evaluation;
//! * [`checkpoint`], [`logs`], [`cli`]: files and the command-line surface.

pub mod checkpoint;
pub mod cli;
pub mod combo;
pub mod config;
pub mod dpft;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod func;
pub mod logs;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use combo::{Modality, ModalityCombination};
pub use error::{Error, Result};
pub use tensor::Tensor;
