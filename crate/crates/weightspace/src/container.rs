//! Manifest + blob tensor container.
//!
//! A container directory holds `manifest.json` (UTF-8: caller-supplied meta
//! document plus a tensor table with name/shape/dtype/offset/CRC32) and
//! `tensors.bin` (the tensors' little-endian 32-bit float data, concatenated
//! in table order). Checkpoints, trained autoencoders, and embedding dumps
//! all reuse this layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Write `tensors` (in order) plus an arbitrary JSON meta document.
pub fn write_container<T: Scalar>(
    dir: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        let start = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            crc32: crc32(&blob[start..]),
        });
    }
    let manifest = ContainerManifest {
        meta,
        tensors: records,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Read a container back; tensors are verified against their checksums.
pub fn read_container<T: Scalar>(
    dir: &Path,
) -> Result<(serde_json::Value, Vec<(String, Tensor<T>)>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "missing manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest: ContainerManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let blob_path = dir.join(BLOB_FILE);
    if !blob_path.exists() {
        return Err(Error::Format(format!(
            "manifest references missing blob {}",
            blob_path.display()
        )));
    }
    let blob = fs::read(blob_path)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        if rec.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor {}: unsupported dtype {}",
                rec.name, rec.dtype
            )));
        }
        let numel: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "tensor {}: blob truncated (need {} bytes, have {})",
                rec.name,
                end,
                blob.len()
            )));
        }
        let bytes = &blob[start..end];
        if crc32(bytes) != rec.crc32 {
            return Err(Error::Format(format!(
                "tensor {}: checksum mismatch",
                rec.name
            )));
        }
        let data: Vec<T> = bytes
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        out.push((rec.name.clone(), Tensor::new(rec.shape.clone(), data)?));
    }
    Ok((manifest.meta, out))
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = !0;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
