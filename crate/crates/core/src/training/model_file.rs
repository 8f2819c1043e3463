//! Versioned model container.
//!
//! ```text
//! magic     8 bytes  "DANETMDL"
//! version   u32 LE
//! header    u64 LE length + UTF-8 TOML (spec, stats, manifest, parameter index)
//! payload   u64 LE count + count × f64 LE, parameters in index order
//! checksum  32 bytes SHA-256 over header bytes and payload bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainedModel, TrainingManifest};
use crate::autodiff::{ParameterStore, Tensor};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::ModelSpec;

pub const MODEL_FILE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DANETMDL";

#[derive(Serialize, Deserialize)]
struct ParamIndex {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    stats: NormStats,
    manifest: TrainingManifest,
    params: Vec<ParamIndex>,
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec.clone(),
        stats: model.stats,
        manifest: model.manifest.clone(),
        params: model
            .params
            .iter()
            .map(|e| ParamIndex {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let header = toml::to_string(&header)?.into_bytes();
    let count: usize = model.params.scalar_count();

    let mut out = Vec::with_capacity(64 + header.len() + count * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    let payload_start = out.len();
    for e in model.params.iter() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Sha256::new();
    h.update(&header);
    h.update(&out[payload_start..]);
    out.extend_from_slice(&h.finalize());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Corrupt("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != MODEL_FILE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_FILE_VERSION,
        });
    }
    let header_len = c.u64("header length")? as usize;
    let header_bytes = c.take(header_len, "header")?;
    let count = c.u64("payload length")? as usize;
    let payload = c.take(
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Corrupt("payload length overflow".into()))?,
        "payload",
    )?;
    let checksum = c.take(32, "checksum")?;
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let mut h = Sha256::new();
    h.update(header_bytes);
    h.update(payload);
    if h.finalize().as_slice() != checksum {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let header: Header = toml::from_str(
        std::str::from_utf8(header_bytes).map_err(|e| Error::Corrupt(format!("header: {e}")))?,
    )
    .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if expected != count {
        return Err(Error::Corrupt(format!(
            "parameter index covers {expected} values, payload holds {count}"
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut params = ParameterStore::new();
    for p in header.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.insert(p.name, Tensor::new(p.shape, data)?)?;
    }
    Ok(TrainedModel {
        spec: header.spec,
        params,
        stats: header.stats,
        manifest: header.manifest,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    decode_model(&fs::read(path)?)
}
