//! Hierarchical contrastive masked audio-visual autoencoder.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and
//! reverse-mode gradients, [`audio`] and [`tokenizer`] turn raw signals into
//! token grids, [`masking`] selects visible tokens, [`encoders`] and
//! [`decoder`] hold the Transformer stacks, [`objectives`] the pre-training
//! losses, [`finetune`] the downstream heads, and [`harness`] the training
//! loops, data handling, metrics and checkpoints used by the CLI.

pub mod error;
pub mod audio;
pub mod numerics;
pub mod tokenizer;
pub mod masking;
pub mod encoders;
pub mod decoder;
pub mod objectives;
pub mod finetune;
pub mod model;
pub mod harness;

pub use error::{Error, Result};
