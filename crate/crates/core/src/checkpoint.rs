//! Binary checkpoints with a JSON sidecar.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PNETCKPT"  u32 version
//! u64 input_dim  u64 num_classes  u8 activation  u64 hidden_len  u64 × hidden_len
//! u64 param_count  f64 × param_count
//! ```
//!
//! The sidecar `<path>.json` repeats the model, lists the filter partition
//! and carries the config hash of the run that wrote it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, FilterSlice, ModelSpec, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelSpec,
    pub partition: Vec<FilterSlice>,
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(model: &ModelSpec, params: &ParamSet) -> Result<Vec<u8>> {
    if model.param_count() != params.len() {
        return Err(Error::Shape(format!(
            "model expects {} parameters, got {}",
            model.param_count(),
            params.len()
        )));
    }
    let mut out = Vec::with_capacity(64 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(model.num_classes as u64).to_le_bytes());
    out.push(match model.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&(model.hidden.len() as u64).to_le_bytes());
    for h in &model.hidden {
        out.extend_from_slice(&(*h as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for w in &params.theta {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelSpec, ParamSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = r.usize()?;
    let num_classes = r.usize()?;
    let activation = match r.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        a => return Err(Error::Checkpoint(format!("unknown activation code {a}"))),
    };
    let depth = r.usize()?;
    if depth > 1024 {
        return Err(Error::Checkpoint(format!("implausible depth {depth}")));
    }
    let hidden = (0..depth).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let model = ModelSpec {
        input_dim,
        hidden,
        activation,
        num_classes,
    };
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.usize()?;
    if count != model.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, model has {}",
            model.param_count()
        )));
    }
    let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
    let theta: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ParamSet::new(theta, model.partition()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((model, params))
}

pub fn save(path: &Path, model: &ModelSpec, params: &ParamSet, config_hash: &str) -> Result<()> {
    let bytes = encode(model, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        partition: params.partition().to_vec(),
        config_hash: config_hash.to_string(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<(ModelSpec, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Sidecar metadata, if the sidecar exists.
pub fn load_meta(path: &Path) -> Result<Option<CheckpointMeta>> {
    let side = sidecar_path(path);
    match fs::read(&side) {
        Ok(b) => Ok(Some(serde_json::from_slice(&b)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&side, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamId};

    fn model() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden: vec![4, 2],
            activation: Activation::Tanh,
            num_classes: 2,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let p = m.init(&mut RngStream::new(1, StreamId::Init));
        let (m2, p2) = decode(&encode(&m, &p).unwrap()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(p, p2);
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let m = model();
        let p = m.init(&mut RngStream::new(2, StreamId::Init));
        save(&path, &m, &p, "abc").unwrap();
        assert_eq!(load(&path).unwrap().1, p);
        let meta = load_meta(&path).unwrap().unwrap();
        assert_eq!(meta.config_hash, "abc");
        assert_eq!(meta.partition, m.partition());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = model();
        let bytes = encode(&m, &m.zeros()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
    }
}
