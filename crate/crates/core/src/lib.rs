//! Core library for occlusion-robust person re-identification.
//!
//! Everything numeric lives here: a small reverse-mode autodiff tape over
//! dense `f64` matrices, a vision-transformer backbone that exposes its
//! class-token attention rows, occlusion synthesis with pixel- and
//! patch-level masks, the attention-disturbance noise canvas and its ascent
//! update, the dual-path loss system, identity-balanced batch sampling, a
//! deterministic synthetic dataset generator, the training step, and
//! CMC/mAP retrieval evaluation.
//!
//! The crate is `no_std` (with `alloc`): it does no I/O and owns no files.
//! Dataset ingestion, checkpoints, config files and the CLI live in the
//! companion `adp-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adm;
pub mod backbone;
pub mod data;
pub mod dpc;
pub mod eval;
pub mod fmath;
pub mod graph;
pub mod image;
pub mod matrix;
pub mod occlusion;
pub mod optim;
pub mod params;
pub mod trainer;

use alloc::string::String;
use core::fmt;

/// Errors shared by all core modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Array or matrix dimensions do not match what the operation requires.
    Shape(String),
    /// A configuration value violates a documented precondition.
    Config(String),
    /// Input data violates a documented precondition (labels, splits, ...).
    Data(String),
    /// A loss or gradient became non-finite; the string names the component.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

/// Deterministic RNG used across the crate.
///
/// ChaCha12 keeps streams reproducible across platforms and lets the trainer
/// persist its exact position (`get_word_pos`) in checkpoints.
pub type Rng = rand_chacha::ChaCha12Rng;
