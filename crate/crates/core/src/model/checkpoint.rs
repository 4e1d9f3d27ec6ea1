//! Parameter checkpoints.
//!
//! Layout: one line of JSON (the `ModelConfig` plus a `format` tag) ended by
//! `\n`, then every parameter as a little-endian f64 in canonical tensor
//! order: embedding, each block's weight then bias from the input upwards,
//! head weight, head bias.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const FORMAT: &str = "cafl-params-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    cfg: ModelConfig,
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_string(&Header {
        format: FORMAT.into(),
        cfg: params.cfg,
    })
    .expect("header serializes");
    let mut buf = Vec::with_capacity(header.len() + 1 + 8 * params.cfg.total_params());
    buf.extend_from_slice(header.as_bytes());
    buf.push(b'\n');
    for t in params.tensors() {
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Shape(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Shape(format!(
            "unknown checkpoint format {:?}",
            header.format
        )));
    }
    header.cfg.validate()?;
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::io(path, e))?;
    let expected = 8 * header.cfg.total_params();
    if body.len() != expected {
        return Err(Error::CorruptPayload {
            expected,
            actual: body.len(),
        });
    }
    let mut params = ModelParams::zeros(header.cfg);
    let mut chunks = body.chunks_exact(8);
    for t in params.tensors_mut() {
        for (x, c) in t.iter_mut().zip(&mut chunks) {
            *x = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(params)
}
