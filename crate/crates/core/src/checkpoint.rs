//! Checkpoint container.
//!
//! Layout: one line of JSON (the header) terminated by `\n`, followed by raw
//! little-endian f32 data. Tensor offsets in the header are byte offsets into
//! the data section. Optimizer moments, when present, are stored as extra
//! tensors named `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{tensor_layout, AttentionMode, ModelConfig, Tensor, Weights};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: u64,
    pub attention_mode: AttentionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub first: Weights,
    pub second: Weights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights,
    pub meta: CheckpointMeta,
    pub moments: Option<Moments>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    data_bytes: u64,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes a checkpoint into bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let names: Vec<String> = tensor_layout(&ckpt.weights.config)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut groups: Vec<(String, &Tensor)> =
        names.iter().cloned().zip(ckpt.weights.tensors()).collect();
    if let Some(m) = &ckpt.moments {
        groups.extend(
            names
                .iter()
                .map(|n| format!("adam.m/{n}"))
                .zip(m.first.tensors()),
        );
        groups.extend(
            names
                .iter()
                .map(|n| format!("adam.v/{n}"))
                .zip(m.second.tensors()),
        );
    }
    let mut entries = Vec::with_capacity(groups.len());
    let mut offset = 0u64;
    for (name, t) in &groups {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.weights.config,
        meta: ckpt.meta.clone(),
        optimizer_step: ckpt.moments.as_ref().map(|m| m.step),
        tensors: entries,
        data_bytes: offset,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(offset as usize);
    for (_, t) in &groups {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ckpt_err(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let data = &bytes[nl + 1..];
    if data.len() as u64 != header.data_bytes {
        return Err(ckpt_err(
            path,
            format!(
                "expected {} data bytes, found {}",
                header.data_bytes,
                data.len()
            ),
        ));
    }
    let layout = tensor_layout(&header.config);
    let groups = if header.optimizer_step.is_some() {
        3
    } else {
        1
    };
    if header.tensors.len() != layout.len() * groups {
        return Err(ckpt_err(path, "tensor count does not match config"));
    }
    let read = |entry: &TensorEntry, expect_name: &str, expect_shape: &[usize]| -> Result<Tensor> {
        if entry.name != expect_name || entry.shape != expect_shape {
            return Err(ckpt_err(
                path,
                format!(
                    "unexpected tensor {} {:?}, wanted {expect_name}",
                    entry.name, entry.shape
                ),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        let raw = data
            .get(start..end)
            .ok_or_else(|| ckpt_err(path, format!("{} overruns data section", entry.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor {
            shape: entry.shape.clone(),
            data: values,
        })
    };
    let group = |g: usize, prefix: &str| -> Result<Weights> {
        let tensors = layout
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                read(
                    &header.tensors[g * layout.len() + i],
                    &format!("{prefix}{name}"),
                    shape,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Weights::from_tensors(header.config, tensors)
    };
    let weights = group(0, "")?;
    let moments = match header.optimizer_step {
        Some(step) => Some(Moments {
            step,
            first: group(1, "adam.m/")?,
            second: group(2, "adam.v/")?,
        }),
        None => None,
    };
    Ok(Checkpoint {
        weights,
        meta: header.meta,
        moments,
    })
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Saves atomically and returns the hex SHA-256 of the written file.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode(ckpt);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingAncestor(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Provenance record written next to each checkpoint as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub file: String,
    pub stage: String,
    pub step: u64,
    pub attention_mode: AttentionMode,
    pub sha256: String,
    pub parent_sha256: Option<String>,
}

pub fn sidecar_path(ckpt_path: &Path) -> PathBuf {
    let mut name = ckpt_path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    ckpt_path.with_file_name(name)
}

/// Saves the checkpoint and its sidecar; returns the sidecar record.
pub fn save_with_sidecar(
    path: &Path,
    ckpt: &Checkpoint,
    parent_sha256: Option<String>,
) -> Result<Sidecar> {
    let sha256 = save(path, ckpt)?;
    let side = Sidecar {
        file: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        stage: ckpt.meta.stage.clone(),
        step: ckpt.meta.step,
        attention_mode: ckpt.meta.attention_mode,
        sha256,
        parent_sha256,
    };
    let json = serde_json::to_vec_pretty(&side)?;
    write_atomic(&sidecar_path(path), &json)?;
    Ok(side)
}

pub fn load_sidecar(ckpt_path: &Path) -> Result<Sidecar> {
    let p = sidecar_path(ckpt_path);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
