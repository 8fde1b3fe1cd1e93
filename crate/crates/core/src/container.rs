//! Shared on-disk layout for datasets and checkpoints: an 8-byte
//! little-endian header length, a UTF-8 JSON header, then a raw payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn encode(header: &serde_json::Value, payload: &[u8]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + head.len() + payload.len());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {n} exceeds file size")))?;
    let header = serde_json::from_slice(&bytes[8..end])?;
    Ok((header, &bytes[end..]))
}

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn f32_payload(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|x| (x as f32).to_le_bytes()).collect()
}

pub fn f64_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn read_f32(payload: &[u8]) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(4) {
        return Err(Error::Format("payload is not a whole number of f32 values".into()));
    }
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
}

pub fn read_f64(payload: &[u8]) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(8) {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    Ok(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let h = serde_json::json!({"version": 1, "x": [1, 2]});
        let bytes = encode(&h, &[1, 2, 3]).unwrap();
        let (h2, p) = decode(&bytes).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, &[1, 2, 3]);
    }

    #[test]
    fn truncated_header_is_an_error() {
        let h = serde_json::json!({"version": 1});
        let bytes = encode(&h, &[]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode(&bytes[..4]).is_err());
    }
}
