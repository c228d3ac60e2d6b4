//! Binary checkpoints: a JSON header followed by raw little-endian `f64` data.
//!
//! Layout: the 8-byte magic `D3NETCK1`, the header length as a little-endian
//! `u64`, the header, then every tensor's values in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::NetworkConfig;
use super::network::{Model, ModelMeta};

const MAGIC: &[u8; 8] = b"D3NETCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: NetworkConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let store = model.store();
    let header = Header {
        fingerprint: model.fingerprint(),
        config: model.config().clone(),
        meta: model.meta.clone(),
        tensors: store
            .iter()
            .map(|(_, e)| TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, e) in store.iter() {
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, rebuilding the network from the config stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    load(path.as_ref(), None)
}

/// Load a checkpoint that must have been produced by `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<Model> {
    load(path.as_ref(), Some(config))
}

fn load(path: &Path, expected: Option<&NetworkConfig>) -> Result<Model> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large".into()))?;
    if len > 64 << 20 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;

    if header.config.fingerprint() != header.fingerprint {
        return Err(bad("stored config does not match its fingerprint".into()));
    }
    if let Some(cfg) = expected {
        if cfg.fingerprint() != header.fingerprint {
            return Err(bad(format!(
                "config fingerprint mismatch: checkpoint has {} ('{}'), expected {} ('{}')",
                header.fingerprint,
                header.config.name,
                cfg.fingerprint(),
                cfg.name
            )));
        }
    }
    header.config.validate()?;

    let mut model = Model::build(&header.config, header.meta.seed)?;
    model.meta = header.meta;
    let store = model.store_mut();
    if store.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, network has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| bad(format!("unknown tensor '{}'", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor '{}' has shape {:?}, network expects {:?}",
                entry.name,
                entry.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| bad("truncated tensor data".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        *store.get_mut(id) = Tensor::new(&entry.shape, data)?;
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    Ok(model)
}
