//! Model checkpoint format: magic "AMCK1", a JSON architecture descriptor
//! block, then the parameter and Adagrad accumulator vectors as 32-bit
//! little-endian floats.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AcousticModel, ModelConfig};
use super::train::OptimizerState;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"AMCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    config: ModelConfig,
    input_dim: usize,
    n_labels: usize,
    initial_learning_rate: f64,
    halve_at_epoch: Option<u64>,
    epsilon: f64,
    epoch: u64,
}

pub fn save_checkpoint(model: &AcousticModel, optimizer: &OptimizerState, path: &Path) -> Result<()> {
    let desc = Descriptor {
        config: model.config().clone(),
        input_dim: model.input_dim(),
        n_labels: model.n_labels(),
        initial_learning_rate: optimizer.initial_learning_rate,
        halve_at_epoch: optimizer.halve_at_epoch,
        epsilon: optimizer.epsilon,
        epoch: optimizer.epoch,
    };
    let desc_json = serde_json::to_vec(&desc)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&desc_json);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for &v in model.params() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(optimizer.accumulators.len() as u32).to_le_bytes());
    for &v in &optimizer.accumulators {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(AcousticModel, OptimizerState)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() < 9 || &raw[0..5] != MAGIC {
        return Err(Error::CorruptHeader {
            path: path.into(),
            message: "missing AMCK1 magic".into(),
        });
    }
    let mut pos = 5usize;
    let read_u32 = |raw: &[u8], pos: &mut usize| -> Result<usize> {
        if *pos + 4 > raw.len() {
            return Err(Error::CorruptHeader {
                path: path.into(),
                message: "truncated length field".into(),
            });
        }
        let v = u32::from_le_bytes(raw[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4;
        Ok(v)
    };
    let desc_len = read_u32(&raw, &mut pos)?;
    if pos + desc_len > raw.len() {
        return Err(Error::CorruptHeader {
            path: path.into(),
            message: "descriptor overruns file".into(),
        });
    }
    let desc: Descriptor = serde_json::from_slice(&raw[pos..pos + desc_len])?;
    pos += desc_len;

    let read_f32_vec = |raw: &[u8], pos: &mut usize| -> Result<Vec<f64>> {
        let n = read_u32(raw, pos)?;
        if *pos + 4 * n > raw.len() {
            return Err(Error::DimensionMismatch {
                path: path.into(),
                message: format!("vector of {n} floats overruns file"),
            });
        }
        let out = raw[*pos..*pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *pos += 4 * n;
        Ok(out)
    };
    let params = read_f32_vec(&raw, &mut pos)?;
    let accumulators = read_f32_vec(&raw, &mut pos)?;

    let model = AcousticModel::from_parts(desc.config, desc.input_dim, desc.n_labels, params)?;
    if accumulators.len() != model.n_params() {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            message: "accumulator vector does not match parameter count".into(),
        });
    }
    let optimizer = OptimizerState {
        accumulators,
        initial_learning_rate: desc.initial_learning_rate,
        halve_at_epoch: desc.halve_at_epoch,
        epsilon: desc.epsilon,
        epoch: desc.epoch,
    };
    Ok((model, optimizer))
}
