//! Versioned binary checkpoints.
//!
//! ```text
//! b"TENETCKP" | u32 version | u64 header length | header JSON
//! | every block's values as little-endian f64, in header order
//! | if the header says so, per block: u64 Adam step, m, v
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TenetModel, TrajectoryEncoder, BLOCK_NAMES};
use crate::ndiff::{AdamState, LayerSpec, Manifest, ParamVec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TENETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Tenet,
    BcShared,
    TrajHn,
    PromptConcat,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Tenet => "tenet",
            ModelKind::BcShared => "bc-shared",
            ModelKind::TrajHn => "traj-hn",
            ModelKind::PromptConcat => "prompt-concat",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tenet" => Ok(ModelKind::Tenet),
            "bc-shared" => Ok(ModelKind::BcShared),
            "traj-hn" => Ok(ModelKind::TrajHn),
            "prompt-concat" => Ok(ModelKind::PromptConcat),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub params: ParamVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    /// Effective run configuration that produced this checkpoint.
    pub run_config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub blocks: Vec<NamedBlock>,
    pub adam: Option<Vec<AdamState>>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    model_config: ModelConfig,
    run_config: serde_json::Value,
    config_hash: String,
    seed: u64,
    steps: u64,
    blocks: Vec<BlockHeader>,
    adam: bool,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Result<&ParamVec> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.params)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no block {name:?}")))
    }

    pub fn from_tenet(
        model: &TenetModel,
        run_config: serde_json::Value,
        config_hash: &str,
        seed: u64,
        steps: u64,
        adam: Option<Vec<AdamState>>,
    ) -> Self {
        Self {
            kind: ModelKind::Tenet,
            model_config: model.config().clone(),
            run_config,
            config_hash: config_hash.to_string(),
            seed,
            steps,
            blocks: model
                .blocks()
                .iter()
                .map(|(n, p)| NamedBlock {
                    name: n.to_string(),
                    params: (*p).clone(),
                })
                .collect(),
            adam,
        }
    }

    pub fn to_tenet(&self) -> Result<TenetModel> {
        if self.kind != ModelKind::Tenet {
            return Err(Error::Incompatible(format!("expected a tenet checkpoint, found {}", self.kind)));
        }
        let [g, h, feat, head] = BLOCK_NAMES.map(|n| self.block(n).cloned());
        TenetModel::from_parts(
            self.model_config.clone(),
            g?,
            h?,
            TrajectoryEncoder {
                feat: feat?,
                head: head?,
            },
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            model_config: self.model_config.clone(),
            run_config: self.run_config.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            steps: self.steps,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    layers: b.params.manifest().layers().to_vec(),
                })
                .collect(),
            adam: self.adam.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.blocks.iter().map(|b| b.params.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + n * 8 * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            put_f64s(&mut out, b.params.values());
        }
        if let Some(adam) = &self.adam {
            if adam.len() != self.blocks.len() {
                return Err(Error::shape("optimizer state blocks", self.blocks.len(), adam.len()));
            }
            for (s, b) in adam.iter().zip(&self.blocks) {
                if s.len() != b.params.len() {
                    return Err(Error::shape(format!("optimizer state for {}", b.name), b.params.len(), s.len()));
                }
                out.extend_from_slice(&s.step.to_le_bytes());
                put_f64s(&mut out, &s.m);
                put_f64s(&mut out, &s.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in &header.blocks {
            let manifest = Manifest::new(bh.layers.clone())?;
            let values = r.f64s(manifest.param_count())?;
            blocks.push(NamedBlock {
                name: bh.name.clone(),
                params: ParamVec::new(manifest, values)?,
            });
        }
        let adam = if header.adam {
            let mut states = Vec::with_capacity(blocks.len());
            for b in &blocks {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let m = r.f64s(b.params.len())?;
                let v = r.f64s(b.params.len())?;
                states.push(AdamState { m, v, step });
            }
            Some(states)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Ok(Self {
            kind: header.kind,
            model_config: header.model_config,
            run_config: header.run_config,
            config_hash: header.config_hash,
            seed: header.seed,
            steps: header.steps,
            blocks,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "tenet train".into(),
            });
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_z: 32,
            d_e: 4,
            proj_hidden: vec![8],
            hyper_hidden: vec![8],
            policy_hidden: vec![4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = TenetModel::init(small(), 5).unwrap();
        let adam: Vec<AdamState> = model
            .blocks()
            .iter()
            .map(|(_, p)| {
                let mut s = AdamState::new(p.len());
                s.m.iter_mut().enumerate().for_each(|(i, m)| *m = (i as f64).sin() * 1e-7);
                s.step = 17;
                s
            })
            .collect();
        let ck = Checkpoint::from_tenet(&model, serde_json::json!({"a": 1}), "deadbeef", 5, 17, Some(adam));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_tenet().unwrap();
        for ((_, a), (_, b)) in model.blocks().iter().zip(m2.blocks().iter()) {
            let ab: Vec<u64> = a.values().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = TenetModel::init(small(), 5).unwrap();
        let ck = Checkpoint::from_tenet(&model, serde_json::Value::Null, "x", 5, 0, None);
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, p).is_err());
    }

    #[test]
    fn missing_file_names_producer() {
        match Checkpoint::load(Path::new("/nonexistent/x.ckpt")) {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "tenet train"),
            other => panic!("{other:?}"),
        }
    }
}
