//! Self-describing checkpoint container.
//!
//! ```text
//! "DBAGCKPT" | u32 format_version | u64 header_len | header JSON | f32 LE tensors in header order
//! ```
//!
//! The header carries the model configuration, the feature standardization
//! statistics, the slicing parameters and free-form training metadata, so a
//! checkpoint alone is enough to embed new data consistently.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Visit;
use super::model::{DbagNet, ModelConfig};
use crate::artifact;
use crate::descriptor::{FeatureStats, SliceParams};
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"DBAGCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub feature_stats: FeatureStats,
    pub stats_hash: String,
    pub region_spec_hash: String,
    pub slice_params: SliceParams,
    /// Training configuration, history summary and provenance hashes.
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: DbagNet,
}

fn collect_tensors(net: &mut DbagNet) -> (Vec<TensorEntry>, Vec<f32>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    net.visit_params("", &mut |name, p| {
        entries.push(TensorEntry {
            name,
            len: p.value.len(),
            buffer: false,
        });
        data.extend_from_slice(&p.value);
    });
    net.visit_buffers("", &mut |name, b| {
        entries.push(TensorEntry {
            name,
            len: b.len(),
            buffer: true,
        });
        data.extend_from_slice(b);
    });
    (entries, data)
}

/// All weights and buffers in checkpoint order.
pub fn flatten_weights(net: &mut DbagNet) -> Vec<f32> {
    collect_tensors(net).1
}

impl Checkpoint {
    pub fn new(
        mut net: DbagNet,
        feature_stats: FeatureStats,
        region_spec_hash: String,
        slice_params: SliceParams,
        metadata: serde_json::Value,
    ) -> Self {
        let (tensors, _) = collect_tensors(&mut net);
        let header = CheckpointHeader {
            format_version: CKPT_VERSION,
            model_config: net.config().clone(),
            stats_hash: feature_stats.hash(),
            feature_stats,
            region_spec_hash,
            slice_params,
            metadata,
            tensors,
        };
        Self { header, net }
    }

    pub fn to_bytes(&mut self) -> Result<Vec<u8>> {
        let (tensors, data) = collect_tensors(&mut self.net);
        self.header.tensors = tensors;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * data.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Writes atomically and returns the SHA-256 of the written bytes.
    pub fn save(&mut self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        artifact::write_atomic(path, &bytes)?;
        Ok(artifact::sha256_hex(&bytes))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCache {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(corrupt("unsupported checkpoint version"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        let payload = &bytes[20 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * 4 {
            return Err(corrupt("tensor payload length does not match header"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut net = DbagNet::new(header.model_config.clone(), 0)?;
        let (expected, _) = collect_tensors(&mut net);
        if expected != header.tensors {
            return Err(corrupt("tensor layout does not match the model configuration"));
        }
        let mut offset = 0;
        net.visit_params("", &mut |_, p| {
            let n = p.value.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        net.visit_buffers("", &mut |_, b| {
            let n = b.len();
            b.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        if header.feature_stats.hash() != header.stats_hash {
            return Err(corrupt("standardization statistics do not match their hash"));
        }
        Ok(Self { header, net })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tensor::Tensor;

    #[test]
    fn save_load_preserves_weights_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut net = DbagNet::new(ModelConfig::compact(), 5).unwrap();
        let x = Tensor::from_vec(2, 1, 40, 60, (0..4800).map(|i| (i as f32 * 0.01).sin()).collect()).unwrap();
        // move the running stats off their defaults
        net.forward_train(x.clone()).unwrap();
        let before = net.forward(&x).unwrap();
        let mut ckpt = Checkpoint::new(
            net,
            FeatureStats::identity(),
            "region".into(),
            SliceParams::default(),
            serde_json::json!({"seed": 5}),
        );
        let h1 = ckpt.save(&path).unwrap();
        let mut loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.header, ckpt.header);
        assert_eq!(loaded.net.forward(&x).unwrap(), before);
        let h2 = loaded.save(&path).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn rejects_truncated_checkpoint() {
        let mut ckpt = Checkpoint::new(
            DbagNet::new(ModelConfig::compact(), 1).unwrap(),
            FeatureStats::identity(),
            String::new(),
            SliceParams::default(),
            serde_json::Value::Null,
        );
        let bytes = ckpt.to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10], p).is_err());
    }
}
