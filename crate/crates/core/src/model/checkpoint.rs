//! Binary checkpoint format, little-endian:
//!
//! ```text
//! magic   8 bytes  "TOPKGAT\x01"
//! version u32      1
//! n       u64      users
//! m       u64      items
//! d       u64      embedding dim
//! L       u64      layers
//! flags   u32      bits 0-1 activation, 2 use_threshold,
//!                  3 normalize_similarity, 4 layer_mean scoring
//! Z0      (n+m)*d  f64, row-major
//! beta    L*n      f64, row-major
//! ```
//!
//! `tau` and `lambda` are not stored; loading yields the provided values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Activation, Hyperparams, ModelParams, Scoring};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TOPKGAT\x01";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 4 + 4;

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::Bandpass => 0,
        Activation::Constant => 1,
        Activation::Relu => 2,
        Activation::Softmax => 3,
    }
}

pub fn flags(h: &Hyperparams) -> u32 {
    activation_code(h.activation)
        | (h.use_threshold as u32) << 2
        | (h.normalize_similarity as u32) << 3
        | ((h.scoring == Scoring::LayerMean) as u32) << 4
}

pub fn encode(p: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (p.embeddings.len() + p.beta.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [p.n_users, p.n_items, p.hyper.dim, p.hyper.layers] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&flags(&p.hyper).to_le_bytes());
    for x in p.embeddings.iter().chain(p.beta.iter()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

/// Parses a checkpoint; `tau` and `lambda` come from the caller.
pub fn decode(bytes: &[u8], tau: f64, lambda: f64) -> Result<ModelParams> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    let version = u32_at(8);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (n, m, d, layers) = (u64_at(12), u64_at(20), u64_at(28), u64_at(36));
    let flags = u32_at(44);
    if flags >> 5 != 0 {
        return Err(bad(format!("unknown flag bits {flags:#x}")));
    }
    let activation = match flags & 0b11 {
        0 => Activation::Bandpass,
        1 => Activation::Constant,
        2 => Activation::Relu,
        _ => Activation::Softmax,
    };
    let hyper = Hyperparams {
        dim: d,
        layers,
        tau,
        lambda,
        activation,
        use_threshold: flags & (1 << 2) != 0,
        normalize_similarity: flags & (1 << 3) != 0,
        scoring: if flags & (1 << 4) != 0 { Scoring::LayerMean } else { Scoring::FinalLayer },
    };
    let z_len = (n + m)
        .checked_mul(d)
        .ok_or_else(|| bad("embedding size overflows".into()))?;
    let b_len = layers.checked_mul(n).ok_or_else(|| bad("beta size overflows".into()))?;
    let expected = z_len
        .checked_add(b_len)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (z, b) = floats.split_at(z_len);
    let params = ModelParams {
        n_users: n,
        n_items: m,
        embeddings: Array2::from_shape_vec((n + m, d), z.to_vec()).map_err(|e| bad(e.to_string()))?,
        beta: Array2::from_shape_vec((layers, n), b.to_vec()).map_err(|e| bad(e.to_string()))?,
        hyper,
    };
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}

pub fn save(p: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, tau: f64, lambda: f64) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, tau, lambda).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
