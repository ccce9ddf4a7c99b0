//! Self-describing binary archives: a magic tag, a format version, a JSON
//! header and raw little-endian `f64` tensor data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UTae};
use crate::nn::Tensor;
use crate::sits::NormStats;

const MAGIC: &[u8; 8] = b"CWSARCH\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("partial");
        let io = |e| Error::io(path, e);
        {
            let mut f = BufWriter::new(File::create(&tmp).map_err(io)?);
            f.write_all(MAGIC).map_err(io)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
            f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            f.write_all(&json).map_err(io)?;
            for t in self.tensors.values() {
                for v in t.data() {
                    f.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            f.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bad = |reason: &str| Error::UnreadableFormat { path: path.to_path_buf(), reason: reason.into() };
        let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not an archive"));
        }
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut u64b = [0u8; 8];
        f.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut json = vec![0u8; len];
        f.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                f.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
}

/// A trained model with everything needed to run it on new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UTae,
    pub norm: NormStats,
    pub state: TrainingState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    config: ModelConfig,
    norm: NormStats,
    state: TrainingState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            norm: self.norm.clone(),
            state: self.state.clone(),
        };
        Archive { kind: "checkpoint".into(), meta: serde_json::to_value(meta)?, tensors: self.model.params.clone() }
            .write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::read(path)?;
        if a.kind != "checkpoint" {
            return Err(Error::CheckpointMismatch(format!("{} holds a {:?} archive", path.display(), a.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(a.meta)
            .map_err(|e| Error::UnreadableFormat { path: path.to_path_buf(), reason: e.to_string() })?;
        let model = UTae::from_parts(meta.config, a.tensors)?;
        if meta.norm.mean.len() != model.config.input_channels {
            return Err(Error::CheckpointMismatch("normalization statistics do not match the input channels".into()));
        }
        Ok(Self { model, norm: meta.norm, state: meta.state })
    }

    /// Fails unless the model accepts `channels` × `frames` inputs.
    pub fn ensure_compatible(&self, channels: usize, frames: usize) -> Result<()> {
        let c = &self.model.config;
        if c.input_channels != channels || c.temporal_positions != frames {
            return Err(Error::CheckpointMismatch(format!(
                "model expects {} frames x {} channels, data has {frames} x {channels}",
                c.temporal_positions, c.input_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UTae {
        UTae::new(ModelConfig {
            levels: 1,
            widths: vec![4, 8],
            input_channels: 2,
            attention_heads: 2,
            temporal_positions: 3,
            d_model: 4,
            d_k: 2,
            norm_groups: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cws");
        let ck = Checkpoint {
            model: small(),
            norm: NormStats { mean: vec![0.1, 0.2], std: vec![1.5, 2.5] },
            state: TrainingState { epoch: 3, step: 17 },
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.ensure_compatible(2, 3).is_ok());
        assert!(matches!(back.ensure_compatible(3, 3), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"hello world, not an archive").unwrap();
        assert!(matches!(Checkpoint::load(&junk), Err(Error::UnreadableFormat { .. })));
        assert!(matches!(Checkpoint::load(dir.path().join("none")), Err(Error::MissingFile(_))));

        let path = dir.path().join("m.cws");
        let ck = Checkpoint { model: small(), norm: NormStats::identity(2), state: TrainingState::default() };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let other = Archive { kind: "patches".into(), meta: serde_json::json!({}), tensors: BTreeMap::new() };
        other.write(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn parameter_shape_mismatch_is_reported() {
        let mut m = small();
        m.params.insert("head.b".into(), Tensor::zeros(&[3]));
        assert!(matches!(UTae::from_parts(m.config.clone(), m.params), Err(Error::CheckpointMismatch(_))));
    }
}
