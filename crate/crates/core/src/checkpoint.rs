//! JSON checkpoint envelope shared by networks, encoder sets and fusion models.
//!
//! Layout:
//!
//! ```text
//! {
//!   "format": "mmsurv-checkpoint",
//!   "version": 1,
//!   "kind": "dense-net" | "encoders" | "fusion" | "model",
//!   "body": { ... }
//! }
//! ```
//!
//! A `DenseNet` body is `{"layers": [{"in_dim", "out_dim", "activation",
//! "weights", "bias"}, ...]}` with `weights` row-major (`out_dim x in_dim`).
//! Floats are written with shortest round-trip formatting and parsed with
//! exact rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "mmsurv-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    body: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    body: T,
}

pub fn to_string<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    let env = EnvelopeRef {
        format: FORMAT,
        version: VERSION,
        kind,
        body: value,
    };
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(Error::Config(format!(
            "not a checkpoint file (format {:?})",
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Config(format!(
            "checkpoint holds a {:?}, expected {kind:?}",
            env.kind
        )));
    }
    Ok(env.body)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    fs::write(path, to_string(kind, value)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(kind, &text)
}
