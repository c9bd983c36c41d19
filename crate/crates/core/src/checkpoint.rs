//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `MCLSRCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! raw little-endian `f64` in header order. Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{write_file, MAX_PREFIX};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::OptimizerState;

const MAGIC: &[u8; 8] = b"MCLSRCKP";
const VERSION: u32 = 1;

/// Early-stopping bookkeeping carried across resumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Best validation Recall@50 so far; `-1` before the first evaluation.
    pub best_recall: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            best_recall: -1.0,
            best_epoch: 0,
            stale_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub progress: Progress,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub best_params: Option<ModelParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    progress: Progress,
    users: usize,
    items: usize,
    has_best: bool,
    tensors: Vec<TensorHeader>,
}

fn groups(ck: &Checkpoint) -> Vec<(&'static str, &ModelParams)> {
    let mut g = vec![
        ("params", &ck.params),
        ("adam_m", &ck.optimizer.m),
        ("adam_v", &ck.optimizer.v),
    ];
    if let Some(b) = &ck.best_params {
        g.push(("best", b));
    }
    g
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        for (prefix, p) in groups(self) {
            for (name, shape, values) in p.tensors() {
                tensors.push(TensorHeader {
                    name: format!("{prefix}.{name}"),
                    shape,
                });
                for v in values {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            progress: self.progress,
            users: self.params.num_users(),
            items: self.params.num_items(),
            has_best: self.best_params.is_some(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let dim = header.config.dim;

        let mut params = ModelParams::zeros(header.users, header.items, dim);
        let mut m = params.clone();
        let mut v = params.clone();
        let mut best = header.has_best.then(|| params.clone());
        let mut targets: Vec<(&str, &mut ModelParams)> = vec![("params", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)];
        if let Some(b) = best.as_mut() {
            targets.push(("best", b));
        }

        let mut offset = 20 + hlen;
        let mut headers = header.tensors.iter();
        for (prefix, target) in targets {
            let expected: Vec<(String, Vec<usize>)> = target
                .tensors()
                .into_iter()
                .map(|(n, s, _)| (format!("{prefix}.{n}"), s))
                .collect();
            for ((name, shape), (_, slot)) in expected.into_iter().zip(target.tensors_mut()) {
                let th = headers.next().ok_or_else(|| bad("missing tensors"))?;
                if th.name != name || th.shape != shape {
                    return Err(bad(&format!(
                        "tensor {} {:?} does not match expected {name} {shape:?}",
                        th.name, th.shape
                    )));
                }
                let nbytes = slot.len() * 8;
                let raw = bytes.get(offset..offset + nbytes).ok_or_else(|| bad("truncated data"))?;
                for (x, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
                offset += nbytes;
            }
        }
        if headers.next().is_some() || offset != bytes.len() {
            return Err(bad("trailing data"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            progress: header.progress,
            params,
            optimizer: OptimizerState {
                m,
                v,
                step: header.step,
            },
            best_params: best,
        })
    }

    /// Checks stored shapes against what `config` and the vocabulary sizes
    /// would produce.
    pub fn check_compatible(&self, config: &TrainConfig, users: usize, items: usize) -> Result<()> {
        let p = &self.params;
        let ok = p.dim() == config.dim
            && p.num_users() == users
            && p.num_items() == items
            && p.pos_emb.nrows() == MAX_PREFIX;
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint holds dim {} with {}/{} users/items, expected dim {} with {users}/{items}",
                p.dim(),
                p.num_users(),
                p.num_items(),
                config.dim
            )))
        }
    }

    pub fn load_for(path: &Path, config: &TrainConfig, users: usize, items: usize) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_compatible(config, users, items)?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn sample() -> Checkpoint {
        let mut rng = substream(9, Stream::Init, 0);
        let params = ModelParams::init(3, 7, 4, &mut rng);
        let mut optimizer = OptimizerState::new(&params);
        optimizer.m = ModelParams::init(3, 7, 4, &mut rng);
        optimizer.step = 17;
        Checkpoint {
            config: TrainConfig {
                dim: 4,
                lr: 0.1 + 0.2,
                ..TrainConfig::default()
            },
            epoch: 3,
            progress: Progress {
                best_recall: 0.123456789,
                best_epoch: 2,
                stale_epochs: 1,
            },
            params: params.clone(),
            optimizer,
            best_params: Some(params),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config.lr.to_bits(), ck.config.lr.to_bits());
    }

    #[test]
    fn dim_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        let cfg = TrainConfig {
            dim: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            Checkpoint::load_for(&path, &cfg, 3, 7),
            Err(Error::Checkpoint(_))
        ));
        let cfg = TrainConfig {
            dim: 4,
            ..TrainConfig::default()
        };
        assert!(Checkpoint::load_for(&path, &cfg, 3, 7).is_ok());
        assert!(Checkpoint::load_for(&path, &cfg, 4, 7).is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
