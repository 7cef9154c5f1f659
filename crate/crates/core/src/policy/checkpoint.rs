//! Checkpoints: a JSON manifest plus a little-endian tensor blob.
//!
//! Tensors are written row-major in [`TENSOR_NAMES`] order. The manifest
//! lists `{name, shape, dtype, byte_offset}` per tensor and names the blob
//! file, which lives next to it.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

use super::params::{PolicyParams, TENSOR_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub byte_len: usize,
    pub tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "refocus-policy-v1";

fn row_major(params: &PolicyParams) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    let mat = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
    let vals = [
        mat(&params.embed_in),
        mat(&params.embed_rec),
        mat(&params.w_k),
        mat(&params.w_q),
        mat(&params.w_v),
        params.b_v.as_slice().to_vec(),
        mat(&params.w_g),
        mat(&params.w_u),
        mat(&params.w_c),
        params.u0.as_slice().to_vec(),
        vec![params.s],
    ];
    params
        .shapes()
        .into_iter()
        .zip(vals)
        .map(|((name, shape), v)| (name, shape, v))
        .collect()
}

/// Serialise to `(manifest, blob)` without touching the filesystem.
pub fn encode(params: &PolicyParams, dtype: Dtype, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.num_scalars() * dtype.width());
    let mut tensors = Vec::new();
    for (name, shape, values) in row_major(params) {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype,
            byte_offset: blob.len(),
        });
        for v in values {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob_name.into(),
        byte_len: blob.len(),
        tensors,
    };
    (manifest, blob)
}

/// Rebuild parameters from a manifest and its blob.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<PolicyParams> {
    if manifest.format != FORMAT {
        return Err(invalid_input(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    if blob.len() != manifest.byte_len {
        return Err(invalid_input(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.byte_len
        )));
    }
    let find = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| invalid_input(format!("checkpoint lacks tensor {name}")))?;
        let count: usize = entry.shape.iter().product();
        let w = entry.dtype.width();
        let end = entry.byte_offset + count * w;
        let bytes = blob
            .get(entry.byte_offset..end)
            .ok_or_else(|| invalid_input(format!("tensor {name} overruns the blob")))?;
        let values = bytes
            .chunks_exact(w)
            .map(|c| match entry.dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        Ok((entry.shape.clone(), values))
    };
    let mat = |name: &str| -> Result<DMatrix<f64>> {
        let (shape, v) = find(name)?;
        match shape.as_slice() {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &v)),
            _ => Err(invalid_input(format!("tensor {name} must be 2-D"))),
        }
    };
    let vec = |name: &str| -> Result<DVector<f64>> {
        let (shape, v) = find(name)?;
        match shape.as_slice() {
            [_] => Ok(DVector::from_vec(v)),
            _ => Err(invalid_input(format!("tensor {name} must be 1-D"))),
        }
    };
    let (s_shape, s) = find("s")?;
    if !s_shape.is_empty() || s.len() != 1 {
        return Err(invalid_input("tensor s must be a scalar"));
    }
    let params = PolicyParams {
        embed_in: mat("embed_in")?,
        embed_rec: mat("embed_rec")?,
        w_k: mat("w_k")?,
        w_q: mat("w_q")?,
        w_v: mat("w_v")?,
        b_v: vec("b_v")?,
        w_g: mat("w_g")?,
        w_u: mat("w_u")?,
        w_c: mat("w_c")?,
        u0: vec("u0")?,
        s: s[0],
    };
    let expected = params.shapes();
    let d = params.dims();
    let consistent = params.embed_rec.shape() == (d.d_e, d.d_e)
        && params.w_k.ncols() == d.d_e
        && params.w_q.shape() == (d.d_model, d.d_g)
        && params.w_v.shape() == (d.d_model, d.d_e)
        && params.b_v.len() == d.d_model
        && params.w_u.shape() == (d.d_g, d.d_model)
        && params.w_c.nrows() == d.d_g
        && params.u0.len() == d.d_g;
    if !consistent || expected.len() != TENSOR_NAMES.len() {
        return Err(invalid_input("checkpoint tensor shapes are inconsistent"));
    }
    Ok(params)
}

/// Write `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save(params: &PolicyParams, dir: &Path, stem: &str, dtype: Dtype) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let (manifest, blob) = encode(params, dtype, &blob_name);
    let blob_path = dir.join(&blob_name);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load from a manifest path.
pub fn load(manifest_path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode(&manifest, &blob)
}
