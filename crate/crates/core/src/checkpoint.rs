//! Tensor archives: a text manifest (`name dtype shape byte_offset` per
//! line) next to one little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// One stored array.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `entries` (in the given order) as `manifest` + `blob`.
pub fn write_archive(manifest: &Path, blob: &Path, entries: &[(String, StoredTensor)]) -> Result<()> {
    if let Some(dir) = manifest.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    let mut bytes = Vec::new();
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(ckpt_err(manifest, format!("tensor name {name:?} contains whitespace")));
        }
        text.push_str(&format!("{name} f32 {} {}\n", shape_str(&t.shape), bytes.len()));
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    Ok(())
}

pub fn read_archive(manifest: &Path, blob: &Path) -> Result<BTreeMap<String, StoredTensor>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| ckpt_err(manifest, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset] = fields[..] else {
            return Err(bad("expected `name dtype shape byte_offset`"));
        };
        if dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = if shape == "scalar" {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(&format!("bad shape {shape}")))?
        };
        let offset: usize = offset.parse().map_err(|_| bad(&format!("bad offset {offset}")))?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(ckpt_err(
                blob,
                format!("{name} needs bytes {offset}..{end}, blob has {}", bytes.len()),
            ));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.insert(name.to_string(), StoredTensor { shape, data }).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

/// Saves every parameter of `store` into `dir`.
pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    let entries = store
        .vars()
        .into_iter()
        .map(|(name, var)| Ok((name, StoredTensor::from_tensor(var.as_tensor())?)))
        .collect::<Result<Vec<_>>>()?;
    write_archive(&dir.join(MANIFEST_FILE), &dir.join(BLOB_FILE), &entries)
}

/// Loads `dir` into an already-built `store`. The archive must hold exactly
/// the store's parameters, each with the shape the config dictates.
pub fn load_params(store: &ParamStore, dir: &Path) -> Result<()> {
    let manifest = dir.join(MANIFEST_FILE);
    let mut stored = read_archive(&manifest, &dir.join(BLOB_FILE))?;
    for (name, var) in store.vars() {
        let t = stored
            .remove(&name)
            .ok_or_else(|| ckpt_err(&manifest, format!("missing parameter {name}")))?;
        if t.shape != var.dims() {
            return Err(ckpt_err(
                &manifest,
                format!("parameter {name} has shape {:?}, config expects {:?}", t.shape, var.dims()),
            ));
        }
        var.set(&t.to_tensor(store.dtype())?)?;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(ckpt_err(&manifest, format!("unexpected parameter {extra}")));
    }
    Ok(())
}
