//! Binary tensor-container checkpoints, shared by backbone, adapter and
//! fusion artifacts.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic "ADPT"
//! bytes 4..8    format version, u32 little-endian (currently 1)
//! bytes 8..12   header length H, u32 little-endian
//! bytes 12..12+H  UTF-8 JSON header:
//!                 { "config": ..., "fingerprint": "...", "metadata": ...,
//!                   "tensors": [ { "name", "shape", "dtype": "f64",
//!                                  "offset", "byte_len" }, ... ] }
//! bytes 12+H..  raw little-endian float64 payloads at the stated offsets
//! ```
//!
//! Offsets are relative to the payload start and tensors are stored in
//! header order. Round-trips are bit-exact. Files are written atomically
//! (temp file then rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    fingerprint: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A parsed checkpoint. Loaded tensors carry `trainable = false`; the caller
/// decides trainability when wiring them into a run.
#[derive(Debug)]
pub struct Container {
    pub config: serde_json::Value,
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

pub fn write_container(
    path: &Path,
    config: serde_json::Value,
    fingerprint: &str,
    metadata: serde_json::Value,
    tensors: &[&Tensor],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let byte_len = (t.data.len() * 8) as u64;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f64".to_string(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = Header {
        config,
        fingerprint: fingerprint.to_string(),
        metadata,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    write_atomic(path, &buf)
}

/// Write bytes via a temp file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("container of {} bytes is too short", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a tensor container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Format(format!("malformed header json: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Format(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != (numel * 8) as u64 {
            return Err(Error::Format(format!(
                "tensor {} byte_len {} does not match shape {:?}",
                entry.name, entry.byte_len, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor {} at offset {}, expected {} (header order)",
                entry.name, entry.offset, expected_offset
            )));
        }
        expected_offset += entry.byte_len;
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} payload is truncated", entry.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::from_vec(entry.name.clone(), &entry.shape, data)?;
        t.trainable = false;
        tensors.push(t);
    }

    Ok(Container {
        config: header.config,
        fingerprint: header.fingerprint,
        metadata: header.metadata,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn sample_tensors() -> Vec<Tensor> {
        let mut rng = SplitRng::new(99);
        vec![
            Tensor::normal("a.w", &[3, 4], 1.0, &mut rng),
            Tensor::normal("a.b", &[1, 4], 1.0, &mut rng),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        let path = dir.join("t.adpt");
        let tensors = sample_tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        write_container(
            &path,
            serde_json::json!({"kind": "test"}),
            "fp",
            serde_json::json!({"note": 1}),
            &refs,
        )
        .unwrap();
        let loaded = read_container(&path).unwrap();
        assert_eq!(loaded.fingerprint, "fp");
        assert_eq!(loaded.tensors.len(), 2);
        for (orig, got) in tensors.iter().zip(&loaded.tensors) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.shape, got.shape);
            let ob: Vec<u64> = orig.data.iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u64> = got.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ob, gb);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let tensors = sample_tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let dir = std::env::temp_dir().join(format!("ckpt-test2-{}", std::process::id()));
        let path = dir.join("t.adpt");
        write_container(&path, serde_json::json!({}), "fp", serde_json::json!({}), &refs).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[2] ^= 0xFF;
        assert!(matches!(parse_container(&bytes), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_header_byte_is_format_error() {
        let tensors = sample_tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let dir = std::env::temp_dir().join(format!("ckpt-test3-{}", std::process::id()));
        let path = dir.join("t.adpt");
        write_container(&path, serde_json::json!({}), "fp", serde_json::json!({}), &refs).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[13] = b'!'; // break the JSON structure just after the opening brace
        assert!(matches!(parse_container(&bytes), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let tensors = sample_tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let dir = std::env::temp_dir().join(format!("ckpt-test4-{}", std::process::id()));
        let path = dir.join("t.adpt");
        write_container(&path, serde_json::json!({}), "fp", serde_json::json!({}), &refs).unwrap();
        let bytes = fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(parse_container(truncated), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_version_is_format_error() {
        let tensors = sample_tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let dir = std::env::temp_dir().join(format!("ckpt-test5-{}", std::process::id()));
        let path = dir.join("t.adpt");
        write_container(&path, serde_json::json!({}), "fp", serde_json::json!({}), &refs).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 2;
        assert!(matches!(parse_container(&bytes), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).ok();
    }
}
