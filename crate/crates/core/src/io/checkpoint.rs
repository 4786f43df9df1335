//! `MOPQCKP1` checkpoints: the model configuration as `key=value` text
//! followed by every parameter tensor in f64.

use std::path::Path;

use super::config::RunConfig;
use super::{put_string, read_file, write_file, FormatError, Reader};
use crate::grad::{ParameterSet, Tensor};
use crate::model::ModelConfig;
use crate::Error;

const MAGIC: &[u8; 8] = b"MOPQCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterSet,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = RunConfig {
        model: ckpt.model.clone(),
        ..RunConfig::default()
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_string(&mut out, &cfg.model_text());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        put_string(&mut out, name);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], what: &str) -> Result<Checkpoint, Error> {
    let mut r = Reader::new(bytes, what);
    r.magic(MAGIC)?;
    let text_at = r.position();
    let text = r.string("configuration")?;
    let model = RunConfig::parse(&text)
        .map_err(|e| FormatError {
            what: what.to_string(),
            offset: text_at as u64,
            detail: e.to_string(),
        })?
        .model;
    let count = r.u32("parameter count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let at = r.position();
        let name = r.string("parameter name")?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let need = rows as u64 * cols as u64 * 8;
        if (r.remaining() as u64) < need {
            return Err(r
                .error(
                    r.position(),
                    format!("parameter '{name}' needs {need} bytes, found {}", r.remaining()),
                )
                .into());
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64("parameter value")?);
        }
        let t = Tensor::new(rows, cols, data).map_err(|e| r.error(at, e.to_string()))?;
        params.insert(name, t).map_err(|e| r.error(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(Checkpoint { model, params })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), Error> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    decode_checkpoint(&read_file(path)?, &path.display().to_string())
}
