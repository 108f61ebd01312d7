//! Checkpoint container: magic, format version, a JSON header describing the
//! architecture and parameter partition, then every parameter as
//! little-endian `f32` (shared tensors in order, then branches by expert id).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ExpertId;
use crate::error::{Error, Result};
use crate::model::{CinUnet, ModelConfig, ParamPartition};
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"EXADCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub partition: ParamPartition,
    /// Optimiser steps taken to produce the parameters.
    pub step: usize,
    /// Seed of the run's random streams; every stream is keyed by it and the step.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: CinUnet,
}

impl Checkpoint {
    pub fn new(model: CinUnet, train: Option<TrainConfig>, step: usize, seed: u64) -> Self {
        let header = CheckpointHeader {
            model: model.config().clone(),
            train,
            partition: model.partition(),
            step,
            seed,
        };
        Checkpoint { header, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.model.shared_param_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let experts: Vec<ExpertId> = self.model.experts().collect();
        let tensors = self
            .model
            .shared_params()
            .iter()
            .map(Vec::as_slice)
            .chain(experts.iter().map(|&e| self.model.expert_params(e).expect("listed branch")));
        for t in tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let header_bytes = body.get(..header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut floats = body[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        if !(body.len() - header_len).is_multiple_of(4) {
            return Err(bad("parameter blob is not a whole number of floats"));
        }
        let mut take = |len: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats.by_ref().take(len).collect();
            if v.len() != len {
                return Err(bad("parameter blob is truncated"));
            }
            Ok(v)
        };
        let shared = header
            .partition
            .shared
            .iter()
            .map(|p| take(p.len))
            .collect::<Result<Vec<_>>>()?;
        let experts = header
            .partition
            .per_expert
            .iter()
            .map(|(&e, entries)| Ok((e, take(entries.iter().map(|p| p.len).sum())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if floats.next().is_some() {
            return Err(bad("trailing data after parameters"));
        }
        let mut model = CinUnet::build(&header.model, 0)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        model.set_params(shared, experts)?;
        if model.partition() != header.partition {
            return Err(bad("partition manifest does not match the architecture"));
        }
        Ok(Checkpoint { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReinitMode;

    fn model() -> CinUnet {
        let mut cfg = ModelConfig::desk(2);
        cfg.input_size = (32, 32);
        let mut m = CinUnet::build(&cfg, 3).unwrap();
        m.expert_params_mut(ExpertId(2)).unwrap()[0] = 0.5;
        m.reinit_expert_branch(ExpertId(6), ReinitMode::Average, false).unwrap();
        m
    }

    #[test]
    fn round_trip() {
        let m = model();
        let ck = Checkpoint::new(m.clone(), Some(TrainConfig::desk()), 17, 9);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.model.shared_params(), m.shared_params());
        for e in m.experts() {
            assert_eq!(back.model.expert_params(e).unwrap(), m.expert_params(e).unwrap());
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(model(), None, 0, 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());

        let mut ck = Checkpoint::new(model(), None, 0, 0);
        ck.header.partition.shared[0].len += 1;
        assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let ck = Checkpoint::new(model(), None, 1, 2);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
    }
}
