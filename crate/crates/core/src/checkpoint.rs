//! Stage checkpoints.
//!
//! File layout: magic `POVCKPT1`, u32 format version, u32 header length, a
//! JSON header, the parameter data as little-endian f32 in header entry
//! order, then a SHA-256 of every preceding byte. Writes go to a temporary
//! file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{PovError, Result};
use crate::masking::{MaskFields, MaskKind, MaskRole, MaskValueField};
use crate::model::{parameter_partition, ModelState};
use crate::params::Partition;
use crate::prompts::ViewPromptBank;

const MAGIC: &[u8; 8] = b"POVCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    ViewTune,
    EgoZeroShot,
    EgoFewShot,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::ViewTune, Stage::EgoZeroShot, Stage::EgoFewShot];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::ViewTune => "view_tune",
            Stage::EgoZeroShot => "ego_zero_shot",
            Stage::EgoFewShot => "ego_few_shot",
        }
    }

    pub fn is_ego(self) -> bool {
        matches!(self, Stage::EgoZeroShot | Stage::EgoFewShot)
    }

    /// Partitions this stage may modify.
    pub fn trainable(self, soft_masks: bool) -> Vec<Partition> {
        match self {
            Stage::Pretrain if soft_masks => vec![Partition::Backbone, Partition::Head, Partition::MaskPrompt],
            Stage::Pretrain => vec![Partition::Backbone, Partition::Head],
            Stage::ViewTune | Stage::EgoZeroShot => vec![Partition::ViewPrompt],
            Stage::EgoFewShot => vec![Partition::Backbone, Partition::Head, Partition::ViewPrompt],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub version_tag: String,
    pub view_ids: Vec<String>,
    pub prompts_per_block: usize,
    pub mask_kind: Option<MaskKind>,
    pub checksums: std::collections::BTreeMap<Partition, String>,
    pub entries: Vec<TensorEntry>,
}

/// Everything a stage hands to the next one.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: String,
    pub model: ModelState<f32>,
    pub bank: Option<ViewPromptBank<f32>>,
    pub masks: Option<MaskFields<f32>>,
}

impl Checkpoint {
    pub fn checksums(&self) -> Result<std::collections::BTreeMap<Partition, String>> {
        Ok(parameter_partition(&self.model, self.bank.as_ref(), self.masks.as_ref())?.checksums())
    }

    fn header_and_data(&self) -> Result<(CheckpointHeader, Vec<f32>)> {
        let mut entries = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut push = |name: String, partition: Partition, shape: Vec<usize>, values: &[f32]| {
            entries.push(TensorEntry {
                name,
                partition,
                shape,
                offset: data.len(),
            });
            data.extend_from_slice(values);
        };
        for (part, p) in self.model.param_refs() {
            push(p.name, part, p.shape, p.values);
        }
        if let Some(bank) = &self.bank {
            for p in bank.param_refs() {
                push(p.name, Partition::ViewPrompt, p.shape, p.values);
            }
        }
        if let Some(masks) = &self.masks {
            // Hard fields are stored too so a checkpoint is self-contained.
            for f in masks.fields() {
                let v = f.values().as_standard_layout();
                push(
                    format!("mask.{}", f.role.name()),
                    Partition::MaskPrompt,
                    f.values().shape().to_vec(),
                    v.as_slice().expect("standard layout"),
                );
            }
        }
        let header = CheckpointHeader {
            stage: self.stage,
            config_hash: self.config_hash.clone(),
            model_config: self.model.config().clone(),
            version_tag: self.model.version_tag.clone(),
            view_ids: self.bank.as_ref().map(|b| b.view_ids().to_vec()).unwrap_or_default(),
            prompts_per_block: self.bank.as_ref().map(|b| b.prompts_per_block()).unwrap_or(0),
            mask_kind: self.masks.as_ref().map(|m| m.kind),
            checksums: self.checksums()?,
            entries,
        };
        Ok((header, data))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, data) = self.header_and_data()?;
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len() * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PovError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| PovError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| PovError::io(&tmp, e))?;
        f.sync_all().map_err(|e| PovError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| PovError::io(path, e))
    }

    pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
        let bytes = fs::read(path).map_err(|e| PovError::io(path, e))?;
        Ok(parse(&bytes, path)?.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PovError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, data) = parse(bytes, path)?;
        let bad = |m: String| PovError::corrupt(path, m);
        let take = |name: &str, shape: &[usize]| -> Result<&[f32]> {
            let e = header
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if e.shape != shape {
                return Err(bad(format!("tensor `{name}` has shape {:?}, expected {shape:?}", e.shape)));
            }
            let len: usize = shape.iter().product();
            data.get(e.offset..e.offset + len)
                .ok_or_else(|| bad(format!("tensor `{name}` out of bounds")))
        };
        let mut model = ModelState::<f32>::zeros(header.model_config.clone())?;
        model.version_tag = header.version_tag.clone();
        let layout = model.layout().clone();
        for e in layout.entries() {
            model.data_mut()[e.range()].copy_from_slice(take(&e.name, &e.shape)?);
        }
        let cfg = &header.model_config;
        let bank = if header.view_ids.is_empty() {
            None
        } else {
            let mut bank = ViewPromptBank::<f32>::zeros(
                &header.view_ids,
                &cfg.block_schedule,
                header.prompts_per_block,
                cfg.embed_dim,
            )?;
            let mut values = Vec::with_capacity(bank.param_count());
            for p in bank.param_refs() {
                values.extend_from_slice(take(&p.name, &p.shape)?);
            }
            bank.data_mut().copy_from_slice(&values);
            Some(bank)
        };
        let masks = match header.mask_kind {
            None => None,
            Some(kind) => {
                let dims = [cfg.frames, cfg.height, cfg.width];
                let field = |role: MaskRole| -> Result<MaskValueField<f32>> {
                    let v = take(&format!("mask.{}", role.name()), &dims)?;
                    let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), v.to_vec())
                        .map_err(|e| bad(e.to_string()))?;
                    Ok(MaskValueField::from_values(role, kind, arr))
                };
                Some(MaskFields::from_fields([
                    field(MaskRole::Left)?,
                    field(MaskRole::Right)?,
                    field(MaskRole::Object)?,
                ])?)
            }
        };
        let ckpt = Checkpoint {
            stage: header.stage,
            config_hash: header.config_hash.clone(),
            model,
            bank,
            masks,
        };
        if ckpt.checksums()? != header.checksums {
            return Err(bad("partition checksums disagree with header".into()));
        }
        Ok(ckpt)
    }
}

fn parse(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bad = |m: &str| PovError::corrupt(path, m.to_string());
    if bytes.len() < 16 + 32 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("trailing checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad("unsupported format version"));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[16..hend]).map_err(|e| PovError::corrupt(path, e.to_string()))?;
    let raw = &body[hend..];
    if raw.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of f32 values"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_verbs: 2,
            num_nouns: 2,
            block_schedule: vec![1, 2],
            seed: 3,
        }
    }

    fn sample(kind: MaskKind) -> Checkpoint {
        let cfg = tiny();
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut masks = MaskFields::init(kind, 2, 8, 8, 4);
        if let Some(v) = masks.field_mut(MaskRole::Right).values_mut() {
            v[[1, 2, 3]] = 0.25;
        }
        Checkpoint {
            stage: Stage::ViewTune,
            config_hash: "abc".into(),
            model: ModelState::new(cfg.clone()).unwrap(),
            bank: Some(ViewPromptBank::init(&ids, &cfg.block_schedule, 2, 8, 5).unwrap()),
            masks: Some(masks),
        }
    }

    #[test]
    fn round_trip() {
        for kind in [MaskKind::Hard, MaskKind::Soft] {
            let c = sample(kind);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(&bytes[..8], b"POVCKPT1");
            let d = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(d.model.data(), c.model.data());
            assert_eq!(d.bank, c.bank);
            assert_eq!(d.masks, c.masks);
            assert_eq!(d.stage, Stage::ViewTune);
            assert_eq!(d.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn without_bank_or_masks() {
        let mut c = sample(MaskKind::Hard);
        c.bank = None;
        c.masks = None;
        let d = Checkpoint::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert!(d.bank.is_none() && d.masks.is_none());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(MaskKind::Soft).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let i = bytes.len() - 100;
        flipped[i] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, Path::new("x")),
            Err(PovError::Corruption { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5], Path::new("x")).is_err());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage/ckpt.bin");
        let c = sample(MaskKind::Soft);
        c.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let d = Checkpoint::load(&path).unwrap();
        assert_eq!(d.checksums().unwrap(), c.checksums().unwrap());
        assert_eq!(Checkpoint::read_header(&path).unwrap().stage, Stage::ViewTune);
    }

    #[test]
    fn trainable_sets() {
        use Partition::*;
        assert_eq!(Stage::ViewTune.trainable(true), vec![ViewPrompt]);
        assert_eq!(Stage::EgoZeroShot.trainable(true), vec![ViewPrompt]);
        assert_eq!(Stage::Pretrain.trainable(true), vec![Backbone, Head, MaskPrompt]);
        assert_eq!(Stage::EgoFewShot.trainable(false), vec![Backbone, Head, ViewPrompt]);
    }
}
