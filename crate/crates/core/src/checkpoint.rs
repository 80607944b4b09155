//! Model files: a parameter vector tagged with the fingerprint of the
//! architecture it belongs to.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DEFKTPV1" | fingerprint: 32 bytes | count: u64 | count x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamVector};

const MAGIC: &[u8; 8] = b"DEFKTPV1";
const HEADER_LEN: usize = 8 + 32 + 8;

pub fn encode(spec: &ModelSpec, params: &ParamVector) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&spec.fingerprint());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode(spec: &ModelSpec, bytes: &[u8], origin: &Path) -> Result<ParamVector> {
    let fail = |reason: String| Error::Load {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail("file too short for a model header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a model file (bad magic)".into()));
    }
    if bytes[8..40] != spec.fingerprint() {
        return Err(fail(format!(
            "model fingerprint does not match architecture {spec}"
        )));
    }
    let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    if count != spec.param_count() {
        return Err(fail(format!(
            "file holds {count} parameters, {spec} needs {}",
            spec.param_count()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(fail(format!(
            "expected {} payload bytes, found {}",
            8 * count,
            body.len()
        )));
    }
    Ok(ParamVector::from(
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>(),
    ))
}

pub fn save_model(path: impl AsRef<Path>, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "refusing to save {} parameters for {spec} ({} expected)",
            params.len(),
            spec.param_count()
        )));
    }
    fs::write(path, encode(spec, params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(spec, &bytes, path)
}
