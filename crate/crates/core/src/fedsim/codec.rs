//! Wire encoding of client updates.
//!
//! Only tensors trainable at depth `k` are sent, in canonical order. The
//! server chose `(k, q)`, so neither is framed. Per tensor:
//!
//! | q | header            | body                                         |
//! |---|-------------------|----------------------------------------------|
//! | 0 | none              | `f32` little-endian per value                |
//! | 1 | `f32` LE scale    | one `i8` code per value, `x ~ code * scale`  |
//! | 2 | `f32` LE scale    | 2-bit codes, 4 per byte, low bits first      |
//!
//! For q=1 the scale is `max|x| / 127`; for q=2 it is `max|x| / 3` and the
//! codes `0..=3` stand for the levels `-3, -1, +1, +3` times the scale. The
//! stored scale is rounded down to the nearest `f32`, so reconstruction
//! error never exceeds `scale / 2` (q=1) or `scale` (q=2).

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UpdateDelta};
use crate::policy::Compression;

#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub len: usize,
    pub scale: f32,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireUpdate {
    pub q: Compression,
    pub k: usize,
    pub tensors: Vec<WireTensor>,
}

fn header_len(q: Compression) -> usize {
    match q {
        Compression::Full => 0,
        Compression::Int8 | Compression::Int2 => 4,
    }
}

fn body_len(q: Compression, count: usize) -> usize {
    (count * q.bits()).div_ceil(8)
}

/// Encoded size of one tensor of `count` values.
pub fn tensor_wire_len(q: Compression, count: usize) -> usize {
    header_len(q) + body_len(q, count)
}

/// Encoded size of an update at depth `k`.
pub fn wire_len(cfg: &ModelConfig, k: usize, q: Compression) -> usize {
    cfg.tensor_sizes()
        .into_iter()
        .zip(cfg.trainable_mask(k))
        .filter(|(_, on)| *on)
        .map(|(n, _)| tensor_wire_len(q, n))
        .sum()
}

/// Largest `f32` not above `x` (for finite, nonnegative `x`).
fn f32_floor(x: f64) -> f32 {
    let s = x as f32;
    if f64::from(s) > x {
        s.next_down()
    } else {
        s
    }
}

const INT2_LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

fn int2_code(u: f64) -> u8 {
    if u >= 2.0 {
        3
    } else if u >= 0.0 {
        2
    } else if u >= -2.0 {
        1
    } else {
        0
    }
}

pub fn encode_tensor(values: &[f64], q: Compression) -> WireTensor {
    let max = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    match q {
        Compression::Full => {
            let mut body = Vec::with_capacity(values.len() * 4);
            for &x in values {
                body.extend_from_slice(&(x as f32).to_le_bytes());
            }
            WireTensor {
                len: values.len(),
                scale: 1.0,
                body,
            }
        }
        Compression::Int8 => {
            let scale = f32_floor(max / 127.0);
            let s = f64::from(scale);
            let body = values
                .iter()
                .map(|&x| {
                    let c = if s > 0.0 {
                        (x / s).round().clamp(-127.0, 127.0)
                    } else {
                        0.0
                    };
                    (c as i8) as u8
                })
                .collect();
            WireTensor {
                len: values.len(),
                scale,
                body,
            }
        }
        Compression::Int2 => {
            let scale = f32_floor(max / 3.0);
            let s = f64::from(scale);
            let mut body = vec![0u8; body_len(q, values.len())];
            for (i, &x) in values.iter().enumerate() {
                let code = if s > 0.0 { int2_code(x / s) } else { 2 };
                body[i / 4] |= code << (2 * (i % 4));
            }
            WireTensor {
                len: values.len(),
                scale,
                body,
            }
        }
    }
}

pub fn decode_tensor(t: &WireTensor, q: Compression, out: &mut [f64]) -> Result<()> {
    let expected = body_len(q, out.len());
    if t.len != out.len() || t.body.len() != expected {
        return Err(Error::CorruptPayload {
            expected,
            actual: t.body.len(),
        });
    }
    let s = f64::from(t.scale);
    match q {
        Compression::Full => {
            for (x, c) in out.iter_mut().zip(t.body.chunks_exact(4)) {
                *x = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
            }
        }
        Compression::Int8 => {
            for (x, &c) in out.iter_mut().zip(&t.body) {
                *x = f64::from(c as i8) * s;
            }
        }
        Compression::Int2 => {
            for (i, x) in out.iter_mut().enumerate() {
                let code = (t.body[i / 4] >> (2 * (i % 4))) & 0b11;
                *x = INT2_LEVELS[code as usize] * s;
            }
        }
    }
    Ok(())
}

pub fn quantize(delta: &UpdateDelta, q: Compression) -> WireUpdate {
    let mask = delta.cfg().trainable_mask(delta.k);
    let tensors = delta
        .values
        .tensors()
        .into_iter()
        .zip(mask)
        .filter(|(_, on)| *on)
        .map(|(t, _)| encode_tensor(t, q))
        .collect();
    WireUpdate {
        q,
        k: delta.k,
        tensors,
    }
}

pub fn dequantize(wire: &WireUpdate, cfg: &ModelConfig) -> Result<UpdateDelta> {
    cfg.check_depth(wire.k)?;
    let mut out = UpdateDelta::zeros(*cfg, wire.k);
    let mask = cfg.trainable_mask(wire.k);
    let targets: Vec<&mut [f64]> = out
        .values
        .tensors_mut()
        .into_iter()
        .zip(mask)
        .filter(|(_, on)| *on)
        .map(|(t, _)| t)
        .collect();
    if targets.len() != wire.tensors.len() {
        return Err(Error::Shape(format!(
            "wire update carries {} tensors, depth {} needs {}",
            wire.tensors.len(),
            wire.k,
            targets.len()
        )));
    }
    for (dst, t) in targets.into_iter().zip(&wire.tensors) {
        decode_tensor(t, wire.q, dst)?;
    }
    Ok(out)
}

impl WireUpdate {
    pub fn encoded_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| header_len(self.q) + t.body.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for t in &self.tensors {
            if header_len(self.q) > 0 {
                out.extend_from_slice(&t.scale.to_le_bytes());
            }
            out.extend_from_slice(&t.body);
        }
        out
    }

    /// Parses a payload produced by [`WireUpdate::to_bytes`] for the given
    /// model shape and server-chosen `(k, q)`.
    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig, k: usize, q: Compression) -> Result<Self> {
        cfg.check_depth(k)?;
        let expected = wire_len(cfg, k, q);
        if bytes.len() != expected {
            return Err(Error::CorruptPayload {
                expected,
                actual: bytes.len(),
            });
        }
        let mut pos = 0;
        let mut tensors = Vec::new();
        for (count, on) in cfg.tensor_sizes().into_iter().zip(cfg.trainable_mask(k)) {
            if !on {
                continue;
            }
            let scale = if header_len(q) > 0 {
                let s = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                pos += 4;
                s
            } else {
                1.0
            };
            let n = body_len(q, count);
            tensors.push(WireTensor {
                len: count,
                scale,
                body: bytes[pos..pos + n].to_vec(),
            });
            pos += n;
        }
        Ok(WireUpdate { q, k, tensors })
    }
}

/// Encodes and decodes `delta`, returning what the server reconstructs and
/// the number of bytes that crossed the wire.
pub fn roundtrip(delta: &UpdateDelta, q: Compression) -> Result<(UpdateDelta, usize)> {
    let wire = quantize(delta, q);
    let bytes = wire.encoded_len();
    Ok((dequantize(&wire, delta.cfg())?, bytes))
}
