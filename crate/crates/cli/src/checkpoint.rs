//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8   magic "ADPCKPT\0"
//! bytes 8..12  format version (u32, currently 1)
//! bytes 12..16 metadata length in bytes (u32)
//! metadata     JSON: config snapshot, epoch/iteration, generator position,
//!              sampler deck, canvas step size, and an ordered index of
//!              named arrays with shapes
//! payload      the arrays' f64 data, contiguous, in index order
//! ```
//!
//! The array index lists every trainable parameter (insertion order), then
//! one optimizer momentum buffer per parameter (`opt.` prefix), then the
//! noise canvas values and momentum.

use std::fs;
use std::path::Path;

use adp_core::adm::NoiseCanvas;
use adp_core::matrix::Matrix;
use adp_core::params::Params;
use adp_core::trainer::{TrainConfig, TrainerState};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;

const MAGIC: &[u8; 8] = b"ADPCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ConfigFile,
    epoch: usize,
    iteration: u64,
    /// u128 generator word position, as a decimal string (JSON numbers
    /// cannot carry the full range).
    rng_word_pos: String,
    sampler_deck: Vec<usize>,
    sampler_pos: usize,
    canvas_step_size: f64,
    arrays: Vec<ArrayEntry>,
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &TrainerState) -> Result<()> {
    let mut arrays: Vec<(String, &Matrix)> = Vec::new();
    for (name, m) in state.params.iter() {
        arrays.push((name.to_string(), m));
    }
    if state.opt_buffers.len() != state.params.len() {
        bail!(
            "snapshot has {} optimizer buffers for {} parameters",
            state.opt_buffers.len(),
            state.params.len()
        );
    }
    for ((name, _), buf) in state.params.iter().zip(state.opt_buffers.iter()) {
        arrays.push((format!("opt.{name}"), buf));
    }
    arrays.push(("canvas.values".to_string(), &state.canvas.values));
    arrays.push(("canvas.momentum".to_string(), &state.canvas.momentum));

    let meta = Meta {
        config: ConfigFile::from_train_config(cfg),
        epoch: state.epoch,
        iteration: state.iteration,
        rng_word_pos: state.rng_word_pos.to_string(),
        sampler_deck: state.sampler_deck.clone(),
        sampler_pos: state.sampler_pos,
        canvas_step_size: state.canvas.step_size,
        arrays: arrays
            .iter()
            .map(|(n, m)| ArrayEntry { name: n.clone(), rows: m.rows(), cols: m.cols() })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let payload: usize = arrays.iter().map(|(_, m)| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + meta_bytes.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, m) in &arrays {
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("cannot write checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainConfig, TrainerState)> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let corrupt = |what: &str| anyhow::anyhow!("corrupt checkpoint {}: {what}", path.display());
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version} (expected {VERSION})")));
    }
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_at = 16 + meta_len;
    if bytes.len() < payload_at {
        return Err(corrupt("truncated metadata"));
    }
    let meta: Meta = serde_json::from_slice(&bytes[16..payload_at])
        .map_err(|e| corrupt(&format!("metadata: {e}")))?;

    let expected: usize = meta.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if bytes.len() != payload_at + expected {
        return Err(corrupt(&format!(
            "payload is {} bytes, index needs {expected}",
            bytes.len() - payload_at
        )));
    }

    let mut at = payload_at;
    let mut read_matrix = |rows: usize, cols: usize| -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
            at += 8;
        }
        Matrix::from_vec(rows, cols, data)
    };

    let mut params = Params::new();
    let mut opt_buffers = Vec::new();
    let mut canvas_values = None;
    let mut canvas_momentum = None;
    for entry in &meta.arrays {
        let m = read_matrix(entry.rows, entry.cols);
        if entry.name == "canvas.values" {
            canvas_values = Some(m);
        } else if entry.name == "canvas.momentum" {
            canvas_momentum = Some(m);
        } else if let Some(pname) = entry.name.strip_prefix("opt.") {
            let expect_for = params
                .iter()
                .nth(opt_buffers.len())
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            if pname != expect_for {
                return Err(corrupt(&format!(
                    "optimizer buffer for '{pname}' out of order (expected '{expect_for}')"
                )));
            }
            opt_buffers.push(m);
        } else {
            params.add(&entry.name, m);
        }
    }
    if opt_buffers.len() != params.len() {
        return Err(corrupt("optimizer buffer count does not match parameters"));
    }
    let canvas = NoiseCanvas {
        values: canvas_values.ok_or_else(|| corrupt("missing canvas.values"))?,
        momentum: canvas_momentum.ok_or_else(|| corrupt("missing canvas.momentum"))?,
        step_size: meta.canvas_step_size,
    };
    let rng_word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| corrupt("generator position is not a decimal integer"))?;

    let cfg = meta.config.to_train_config()?;
    let state = TrainerState {
        params,
        opt_buffers,
        canvas,
        rng_word_pos,
        sampler_deck: meta.sampler_deck,
        sampler_pos: meta.sampler_pos,
        epoch: meta.epoch,
        iteration: meta.iteration,
    };
    Ok((cfg, state))
}
