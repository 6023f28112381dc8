//! Desk-scale unified driving model: one shared transformer emits language
//! tokens autoregressively and continuous action trajectories by flow
//! matching, in a single forward pass over a mixed token sequence.
//!
//! Crate layout:
//! - [`tensor`]: reverse-mode autodiff on dense f64 tensors, checkpoints,
//!   finite-difference gradient verification.
//! - [`rng`]: labeled deterministic random streams (bitwise reproducible).
//! - [`se2`]: planar rigid transforms, Procrustes clip alignment, stitching.
//! - [`scenario`]: synthetic 2D driving worlds, BEV patch tokens, QA pairs,
//!   JSONL datasets.
//! - [`layout`]: mixed token sequences (memory/vision/state/question/answer/
//!   action spans) and the block attention mask.
//! - [`model`]: the shared backbone (dense and routed variants), embedders,
//!   language and velocity heads, joint loss.
//! - [`flow`]: noise interpolation and Euler integration of the learned
//!   velocity field, with the delta-position output convention.
//! - [`intent`]: intent embedding table, classifier-free guidance, intent
//!   prediction and conditioning sources.
//! - [`memory`]: bounded FIFO memory channel, pose-modulated read/write
//!   through a shared propagation transformer, streaming step.
//! - [`metrics`]: rater feedback score, displacement errors, trust-region
//!   rate, sequence-level ADE over stitched streams.
//! - [`optim`]: AdamW with linear warmup + cosine decay.
//! - [`train`]: joint SFT over modes, chunked and streaming temporal regimes.
//! - [`grpo`]: group-relative policy optimization over stochastic rollouts.
//! - [`pipeline`]: end-to-end commands shared by the CLI and the test suite.

pub mod config;
pub mod flow;
pub mod grpo;
pub mod intent;
pub mod layout;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod mot;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod se2;
pub mod svg;
pub mod tensor;
pub mod train;
