//! Sparse mixture of LoRA experts over a shared frozen feed-forward network.
//!
//! Module map:
//!
//! * [`numerics`]: tensors and tape-based reverse-mode autodiff
//! * [`lora`]: low-rank adapters over frozen projections
//! * [`moe`]: router, expert LoRA triples, load-balance loss, and the
//!   vanilla / optimized block forward paths
//! * [`model`]: a small decoder transformer with attention adapters and
//!   MixLoRA blocks in place of its FFNs, plus the training step
//! * [`multitask`]: several adapter sets trained side by side over one base
//! * [`bench`]: multiply-add ledger, latency harness, comparison reports
//! * [`run`]: run configuration, synthetic tasks, checkpoints and the
//!   drivers behind the command-line tool

pub mod bench;
pub mod error;
pub mod lora;
pub mod model;
pub mod moe;
pub mod multitask;
pub mod numerics;
pub mod optim;
pub mod run;

pub use error::{CheckpointError, Error, Result};

/// RNG used for dropout masks and all seeded initialization.
pub type DropoutRng = rand_chacha::ChaCha8Rng;
