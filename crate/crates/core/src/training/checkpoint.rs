//! Parameter files: a short text preamble, a JSON manifest naming every
//! tensor with its shape and byte offset, then one flat little-endian blob.
//!
//! ```text
//! mlcrnn-params 1
//! <manifest length in bytes>
//! <manifest JSON>
//! <blob>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Precision, Scalar};

use super::model::{Architecture, ModelParams};

const MAGIC: &str = "mlcrnn-params 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

fn width(p: Precision) -> usize {
    match p {
        Precision::Single => 4,
        Precision::Double => 8,
    }
}

pub fn manifest_of<T: Scalar, P: ParamSet<T>>(params: &P, architecture: Option<&Architecture>) -> Manifest {
    let mut offset = 0;
    let tensors = params
        .params()
        .iter()
        .map(|p| {
            let bytes = p.data.len() * T::BYTES;
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                bytes,
            };
            offset += bytes;
            e
        })
        .collect();
    Manifest {
        precision: T::PRECISION,
        architecture: architecture.cloned(),
        tensors,
        blob_bytes: offset,
    }
}

pub fn write_params<T: Scalar, P: ParamSet<T>, W: Write>(
    out: &mut W,
    params: &P,
    architecture: Option<&Architecture>,
) -> std::io::Result<()> {
    let manifest = manifest_of(params, architecture);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", json.len())?;
    out.write_all(json.as_bytes())?;
    let mut blob = Vec::with_capacity(manifest.blob_bytes);
    for p in params.params() {
        for &v in p.data {
            v.write_le(&mut blob);
        }
    }
    out.write_all(&blob)
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Parse the preamble and manifest; returns the manifest and the blob.
pub fn read_params_file(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(format_err(path, "not a parameter file (bad magic line)"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let len: usize = line
        .trim_end()
        .parse()
        .map_err(|_| format_err(path, "bad manifest length line"))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| format_err(path, "truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| format_err(path, format!("manifest: {e}")))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(format_err(
            path,
            format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
        ));
    }
    let w = width(manifest.precision);
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.bytes != n * w || t.offset + t.bytes > blob.len() {
            return Err(format_err(path, format!("tensor `{}` lies outside the blob", t.name)));
        }
    }
    Ok((manifest, blob))
}

/// Fill `params` from a file with exactly matching names and shapes. Values
/// stored at another precision are converted.
pub fn load_into<T: Scalar, P: ParamSet<T>>(path: &Path, manifest: &Manifest, blob: &[u8], params: &mut P) -> Result<()> {
    let mut dst = params.params_mut();
    if dst.len() != manifest.tensors.len() {
        return Err(format_err(
            path,
            format!("{} tensors in file, model has {}", manifest.tensors.len(), dst.len()),
        ));
    }
    let w = width(manifest.precision);
    for (d, e) in dst.iter_mut().zip(&manifest.tensors) {
        if d.name != e.name || d.shape != e.shape {
            return Err(format_err(
                path,
                format!("tensor `{}` {:?} does not match model tensor `{}` {:?}", e.name, e.shape, d.name, d.shape),
            ));
        }
        let bytes = &blob[e.offset..e.offset + e.bytes];
        for (v, chunk) in d.data.iter_mut().zip(bytes.chunks_exact(w)) {
            *v = match manifest.precision {
                Precision::Single => T::lit(f32::read_le(chunk) as f64),
                Precision::Double => T::lit(f64::read_le(chunk)),
            };
        }
    }
    Ok(())
}

pub fn save_model<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params, Some(&params.arch)).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let (manifest, blob) = read_params_file(path)?;
    let arch = manifest
        .architecture
        .clone()
        .ok_or_else(|| format_err(path, "manifest has no architecture"))?;
    let mut params = ModelParams::zeros(&arch)?;
    load_into(path, &manifest, &blob, &mut params)?;
    Ok(params)
}
