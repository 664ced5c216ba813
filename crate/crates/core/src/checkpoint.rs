//! Checkpoint serialization.
//!
//! Layout: one version byte, a little-endian u64 manifest length, the JSON
//! manifest, then the raw tensor data as little-endian f64, tensors in
//! manifest order. When optimizer state is present, each tensor's Adam
//! moments (m then v) follow the parameter block in the same order.
//!
//! The manifest carries the model config, the training step, every
//! tensor's tag and shape, and the optimizer hyperparameters. Loading
//! validates the version byte, the manifest against the config's canonical
//! roster, and the exact byte length of the data section, so truncated or
//! tampered files fail loudly instead of producing garbage weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{build_model, ModelConfig, ModelParams, ParamTag};
use crate::optim::{AdamConfig, AdamState, Optimizer};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    tag: ParamTag,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    adam: AdamConfig,
    base_lr: f64,
    warmup_steps: u64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint: parameters, the step they were saved at, and the
/// optimizer if its state was included.
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub optimizer: Option<Optimizer>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    step: u64,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    if let Some(opt) = optimizer {
        if opt.states().len() != params.params().len() {
            return Err(Error::InvalidArgument {
                op: "save_checkpoint",
                detail: format!(
                    "optimizer tracks {} tensors, model has {}",
                    opt.states().len(),
                    params.params().len()
                ),
            });
        }
    }
    let manifest = Manifest {
        config: *params.config(),
        step,
        tensors: params
            .params()
            .iter()
            .map(|p| TensorEntry { tag: p.tag.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            adam: *o.config(),
            base_lr: o.base_lr(),
            warmup_steps: o.warmup_steps(),
            step: o.current_step(),
        }),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for p in params.params() {
        write_f64s(&mut w, p.value.data())?;
    }
    if let Some(opt) = optimizer {
        for state in opt.states() {
            write_f64s(&mut w, &state.m)?;
            write_f64s(&mut w, &state.v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|_| Error::Format("missing version byte".into()))?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            version[0]
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|_| Error::Format("missing manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(|_| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("bad manifest JSON: {e}")))?;

    // The manifest must agree with the canonical roster for its config;
    // that pins tag spelling, order and shapes in one check.
    let mut params = build_model(&manifest.config, 0)?;
    if manifest.tensors.len() != params.params().len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            params.params().len()
        )));
    }
    for (entry, p) in manifest.tensors.iter().zip(params.params()) {
        if entry.tag != p.tag || entry.shape != p.value.shape() {
            return Err(Error::Format(format!(
                "manifest entry `{}` {:?} does not match roster `{}` {:?}",
                entry.tag,
                entry.shape,
                p.tag,
                p.value.shape()
            )));
        }
    }

    for (i, entry) in manifest.tensors.iter().enumerate() {
        let data = read_f64s(&mut r, entry.shape.iter().product())
            .map_err(|_| Error::Format(format!("truncated data for `{}`", entry.tag)))?;
        params.params_mut()[i].value = Tensor::new(entry.shape.clone(), data)?;
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(entry) => {
            let mut states = Vec::with_capacity(manifest.tensors.len());
            for t in &manifest.tensors {
                let n = t.shape.iter().product();
                let m = read_f64s(&mut r, n)
                    .map_err(|_| Error::Format(format!("truncated optimizer m for `{}`", t.tag)))?;
                let v = read_f64s(&mut r, n)
                    .map_err(|_| Error::Format(format!("truncated optimizer v for `{}`", t.tag)))?;
                states.push(AdamState { m, v });
            }
            Some(Optimizer::from_parts(entry.adam, entry.base_lr, entry.warmup_steps, entry.step, states)?)
        }
    };

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok(Checkpoint { params, step: manifest.step, optimizer })
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
