//! Binary checkpoint container.
//!
//! Layout: `b"LMAE"`, format version (`u32` LE), header length (`u64` LE),
//! JSON header, then little-endian `f64` arrays: parameters in declaration
//! order, first moments, second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use super::train::{EpochLog, TrainConfig, Trainer};
use crate::data::LabSchema;
use crate::error::{Error, Result};
use crate::math::{AdamWConfig, Matrix, OptimState};

const MAGIC: &[u8; 4] = b"LMAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    optimizer_step: u64,
    optimizer: AdamWConfig,
    tensors: Vec<(String, usize, usize)>,
    schema: Option<LabSchema>,
    log: Vec<EpochLog>,
}

pub fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let names = t.params.tensor_names();
    let header = Header {
        model: t.model.clone(),
        train: t.config.clone(),
        epoch: t.epoch,
        optimizer_step: t.optim.step,
        optimizer: t.optim.config,
        tensors: names
            .into_iter()
            .zip(t.params.shapes())
            .map(|(n, (r, c))| (n, r, c))
            .collect(),
        schema: t.schema.clone(),
        log: t.log.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = t.params.n_scalars();
    let mut out = Vec::with_capacity(16 + json.len() + 24 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = t
        .params
        .tensors()
        .into_iter()
        .chain(t.optim.first_moment.iter())
        .chain(t.optim.second_moment.iter());
    for m in arrays {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let mut trainer = Trainer::new(header.model, header.train)
        .map_err(|e| Error::Checkpoint(format!("invalid configuration in header: {e}")))?;
    let expected: Vec<(String, usize, usize)> = trainer
        .params
        .tensor_names()
        .into_iter()
        .zip(trainer.params.shapes())
        .map(|(n, (r, c))| (n, r, c))
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the configured architecture"));
    }
    let n = trainer.params.n_scalars();
    let data = &bytes[16 + hlen..];
    if data.len() != 3 * n * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            data.len(),
            3 * n * 8
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |m: &mut Matrix| {
        for v in m.data_mut() {
            *v = values.next().expect("length checked");
        }
    };
    for m in trainer.params.tensors_mut() {
        fill(m);
    }
    let OptimState {
        first_moment,
        second_moment,
        ..
    } = &mut trainer.optim;
    first_moment.iter_mut().for_each(&mut fill);
    second_moment.iter_mut().for_each(&mut fill);
    trainer.optim.step = header.optimizer_step;
    trainer.optim.config = header.optimizer;
    trainer.epoch = header.epoch;
    trainer.schema = header.schema;
    trainer.log = header.log;
    Ok(trainer)
}

/// Writes to a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(t)?;
    let tmp = path.with_extension("lmae.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Full training state, for resuming.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    Ok(load_trainer(path)?.params)
}
