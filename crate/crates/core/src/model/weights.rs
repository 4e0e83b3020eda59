//! Weight file format (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "EQMW"
//! version    u16      1
//! spec_hash  u64      ModelSpec::hash()
//! spec_len   u32      then spec_len bytes of spec JSON
//! meta_len   u32      then meta_len bytes of training-report JSON (0 = none)
//! n_params   u32      then n_params f32 values
//! ```

use std::path::Path;

use super::{Model, ModelSpec, TrainingReport};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EQMW";
pub const VERSION: u16 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let spec = serde_json::to_vec(model.spec()).expect("spec serializes");
    let meta = match model.report() {
        Some(r) => serde_json::to_vec(r).expect("report serializes"),
        None => Vec::new(),
    };
    let mut out = Vec::with_capacity(32 + spec.len() + meta.len() + 4 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.spec().hash().to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format(format!(
                "truncated weight file: wanted {n} more bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a model weight file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let hash = r.u64()?;
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::Format(format!("bad spec section: {e}")))?;
    if spec.hash() != hash {
        return Err(Error::Format("spec hash does not match the embedded spec".into()));
    }
    let meta_len = r.u32()? as usize;
    let report: Option<TrainingReport> = if meta_len == 0 {
        r.take(0)?;
        None
    } else {
        Some(
            serde_json::from_slice(r.take(meta_len)?)
                .map_err(|e| Error::Format(format!("bad metadata section: {e}")))?,
        )
    };
    let n = r.u32()? as usize;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("parameter count overflow".into()))?)?;
    if !r.buf.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.buf.len())));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Model::from_parts(spec, params, report)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a model and insists its architecture hash equals `expected`'s.
pub fn load_model_as(path: &Path, expected: &ModelSpec) -> Result<Model> {
    let model = load_model(path)?;
    if model.spec().hash() != expected.hash() {
        return Err(Error::Format(format!(
            "architecture mismatch: file holds {}, expected {}",
            model.spec().name(),
            expected.name()
        )));
    }
    Ok(model)
}
