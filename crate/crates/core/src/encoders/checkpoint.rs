//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "AFCK"  u32 version=1  f64 tau  u32 param_count
//! per parameter, sorted by name:
//!   u16 name_len  name (UTF-8)  u8 ndim  u32 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! θ is stored under `vision.*`, φ under `text.*` and the frozen snapshot θ₀
//! (when taken) under `frozen.vision.*`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ModelState, Params, FROZEN_PREFIX, TEXT_PREFIX, VISION_PREFIX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u32 = 1;

/// Serializes to the canonical byte form.
pub fn write_checkpoint<S: Scalar>(state: &ModelState<S>) -> Result<Vec<u8>> {
    let mut all: BTreeMap<String, &Tensor<S>> = BTreeMap::new();
    for (name, t) in state.theta.iter().chain(state.phi.iter()) {
        all.insert(name.clone(), t);
    }
    if let Some(theta0) = state.theta0() {
        for (name, t) in theta0.iter() {
            all.insert(format!("{FROZEN_PREFIX}{name}"), t);
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_f64::<LE>(state.tau().as_f64()).unwrap();
    out.write_u32::<LE>(len_u32(all.len(), "parameter count")?).unwrap();
    for (name, t) in all {
        let bytes = name.as_bytes();
        let name_len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.write_u16::<LE>(name_len).unwrap();
        out.extend_from_slice(bytes);
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("too many dims in {name}")))?;
        out.write_u8(ndim).unwrap();
        for &d in t.shape() {
            out.write_u32::<LE>(len_u32(d, "dimension")?).unwrap();
        }
        for &x in t.data() {
            out.write_f64::<LE>(x.as_f64()).unwrap();
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

pub fn save_checkpoint<S: Scalar>(state: &ModelState<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses checkpoint bytes. Truncation surfaces as an I/O error
/// (`UnexpectedEof`); bad magic, version or layout as a format error.
pub fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    let eof = |e| Error::io("<checkpoint>", e);
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tau = r.read_f64::<LE>().map_err(eof)?;
    let count = r.read_u32::<LE>().map_err(eof)?;
    let (mut theta, mut phi, mut theta0) = (Params::new(), Params::new(), Params::new());
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.read_u16::<LE>().map_err(eof)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Format(format!("parameters out of canonical order at {name}")));
        }
        let ndim = r.read_u8().map_err(eof)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LE>().map_err(eof)? as usize);
        }
        let numel: usize = shape.iter().product();
        let remaining = bytes.len() - r.position() as usize;
        if numel.saturating_mul(8) > remaining {
            return Err(eof(std::io::ErrorKind::UnexpectedEof.into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::lit(r.read_f64::<LE>().map_err(eof)?));
        }
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if let Some(rest) = name.strip_prefix(FROZEN_PREFIX) {
            if !rest.starts_with(VISION_PREFIX) {
                return Err(Error::Format(format!("unexpected frozen parameter {name}")));
            }
            theta0.insert(rest, t)?;
        } else if name.starts_with(VISION_PREFIX) {
            theta.insert(name.clone(), t)?;
        } else if name.starts_with(TEXT_PREFIX) {
            phi.insert(name.clone(), t)?;
        } else {
            return Err(Error::Format(format!("unknown parameter namespace: {name}")));
        }
        prev = Some(name);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let theta0 = (!theta0.is_empty()).then_some(theta0);
    ModelState::from_parts(theta, phi, S::lit(tau), theta0).map_err(|e| Error::Format(e.to_string()))
}
