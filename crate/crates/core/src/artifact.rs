//! On-disk container shared by landmark caches, feature caches and reference
//! sets, plus the hashing and atomic-write helpers every artifact uses.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DBAG" | format_version | kind | rank | dim_0 .. dim_{rank-1} | f32 LE row-major data
//! ```
//!
//! A landmark cache is `kind = 1, rank = 3, dims = [n_frames, 478, 3]`, a
//! feature cache `kind = 2, rank = 2, dims = [n_frames, 600]`, an embedding
//! matrix `kind = 3, rank = 2, dims = [n, embedding_dim]`. Each binary file
//! travels with a JSON sidecar holding its metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DBAG";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Landmarks = 1,
    Features = 2,
    Embeddings = 3,
}

impl ContainerKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Self::Landmarks),
            2 => Some(Self::Features),
            3 => Some(Self::Embeddings),
            _ => None,
        }
    }
}

/// Serialize a float tensor into container bytes. Non-finite values are refused.
pub fn encode_container(kind: ContainerKind, shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeError(format!(
            "container shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("container value at flat index {pos}")));
    }
    let mut out = Vec::with_capacity(16 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::ShapeError(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse container bytes, checking magic, version, kind and that the payload
/// length matches the header exactly.
pub fn decode_container(bytes: &[u8], kind: ContainerKind, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let corrupt = |reason: String| Error::CorruptCache {
        path: path.to_path_buf(),
        reason,
    };
    let mut cursor = 0usize;
    let mut next_u32 = |what: &str| -> Result<u32> {
        let chunk = bytes
            .get(cursor..cursor + 4)
            .ok_or_else(|| corrupt(format!("truncated header while reading {what}")))?;
        cursor += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    next_u32("magic")?;
    let version = next_u32("format_version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let found = next_u32("kind")?;
    match ContainerKind::from_u32(found) {
        Some(k) if k == kind => {}
        _ => return Err(corrupt(format!("expected container kind {}, found {found}", kind as u32))),
    }
    let rank = next_u32("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(corrupt(format!("invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(next_u32(&format!("dim {i}"))? as usize);
    }
    let header = 16 + 4 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("shape overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(corrupt(format!(
            "payload has {} bytes, header {shape:?} requires {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn write_container(path: &Path, kind: ContainerKind, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_container(kind, shape, data)?;
    write_atomic(path, &bytes)
}

pub fn read_container(path: &Path, kind: ContainerKind) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_container(&bytes, kind, path)
}

/// Write through a temp file in the same directory and rename into place, so
/// concurrent readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&text)?)
}

/// Sidecar path for a binary artifact: `foo.dbag` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a value's canonical JSON form. Struct fields serialize in
/// declaration order, so equal values hash equally.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// Hash of a float slice by its exact bit pattern.
pub fn hash_f32s(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dbag");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.35).collect();
        write_container(&path, ContainerKind::Features, &[3, 4], &data).unwrap();
        let (shape, back) = read_container(&path, ContainerKind::Features).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_nan_on_write() {
        let err = encode_container(ContainerKind::Features, &[1, 2], &[0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let bytes = encode_container(ContainerKind::Landmarks, &[1, 478, 3], &vec![0.5; 1434]).unwrap();
        let p = Path::new("mem");
        assert!(decode_container(&bytes, ContainerKind::Features, p).is_err());
        let err = decode_container(&bytes[..bytes.len() - 3], ContainerKind::Landmarks, p).unwrap_err();
        assert!(matches!(err, Error::CorruptCache { .. }));
        let err = decode_container(&bytes[..10], ContainerKind::Landmarks, p).unwrap_err();
        assert!(matches!(err, Error::CorruptCache { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_container(&bad, ContainerKind::Landmarks, p),
            Err(Error::CorruptCache { .. })
        ));
    }
}
