//! Byteplot imaging, masked-autoencoder pretraining and classification for
//! program binaries.
//!
//! The pipeline, end to end:
//!
//! 1. [`byteplot`] turns a binary into an image: bytes laid out row-major at
//!    a fixed width (0 black, 255 white), DEX sections routed to RGB channels
//!    via [`dexparse`], then a Lanczos-3 resample to a canonical square.
//! 2. [`mae`] pretrains a vision transformer ([`vit`]) by hiding 75% of the
//!    patches and regressing their normalized pixels from the visible rest.
//! 3. [`classify`] fine-tunes the pretrained encoder with a linear head for
//!    binary, type or family classification under class-rebalanced
//!    cross-entropy, and collapses fine predictions to coarse verdicts.
//! 4. [`eval`] scores everything: macro metrics, confusion matrices, ROC/AUC
//!    and the masked-reconstruction error protocol.
//!
//! Everything numerical runs on [`tensor`], a small reverse-mode autodiff
//! array library; [`cli`] wires the stages into commands.

pub mod byteplot;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod dexparse;
pub mod error;
pub mod eval;
pub mod mae;
pub mod seed;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// CLI entry point used by the `binsight` binary; returns the process exit
/// code (0 success/benign, 1 operational error, 2 malicious verdict).
pub fn run_cli() -> i32 {
    cli::run(std::env::args_os())
}

// The book's code blocks run as doctests, so the guide cannot drift from the
// API: `cargo test --doc` checks every chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/byteplots.md")]
    pub struct Byteplots;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/architecture.md")]
    pub struct Architecture;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct CliGuide;
    #[doc = include_str!("../../../book/src/scaling-up.md")]
    pub struct ScalingUp;
}
