//! Parameter bundle for the full model and its on-disk checkpoint format.
//!
//! Checkpoint layout: magic `TERSECKPT\0`, format version `u16` LE, a
//! `u32` LE manifest length, a JSON manifest (tensor name -> shape, dtype,
//! byte offset into the payload), then the raw little-endian float32
//! buffers. BN running statistics are stored alongside the parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxiliary::{RestorationNet, RewiringNet};
use crate::encoder::{Classifier, Encoder, EncoderConfig, EMBED_DIM};
use crate::error::ConfigError;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 10] = b"TERSECKPT\0";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic in {0}")]
    BadMagic(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated: expected {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' shape mismatch: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid model config in checkpoint: {0}")]
    Config(#[from] ConfigError),
}

/// Named parameter groups with distinct training schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Classifier,
    Restoration,
    Rewiring,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Classifier,
        ParamGroup::Restoration,
        ParamGroup::Rewiring,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Restoration => "restoration",
            ParamGroup::Rewiring => "rewiring",
        }
    }
}

/// Which auxiliary heads have been trained during pre-training. A head
/// that was disabled at pre-training time carries only its random init and
/// must not be plugged into adaptation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuxState {
    pub restoration_trained: bool,
    pub rewiring_trained: bool,
}

impl Default for AuxState {
    fn default() -> Self {
        AuxState {
            restoration_trained: false,
            rewiring_trained: false,
        }
    }
}

/// Full model: encoder, classifier, and the two auxiliary heads.
pub struct ModelBundle {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub restoration: RestorationNet,
    pub rewiring: RewiringNet,
    pub aux: AuxState,
}

impl ModelBundle {
    /// Fresh bundle with seed-deterministic initialization.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, ConfigError> {
        let mut rng = SeedRng::new(seed).derive("model-init");
        let encoder = Encoder::new(cfg.clone(), &mut rng)?;
        let classifier = Classifier::new(cfg.channels, EMBED_DIM, cfg.num_classes, &mut rng);
        let restoration = RestorationNet::new(EMBED_DIM, &mut rng);
        let rewiring = RewiringNet::new(EMBED_DIM, &mut rng);
        Ok(ModelBundle {
            encoder,
            classifier,
            restoration,
            rewiring,
            aux: AuxState::default(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<(String, Tensor)> {
        match group {
            ParamGroup::Encoder => self.encoder.named_params(),
            ParamGroup::Classifier => self.classifier.named_params(),
            ParamGroup::Restoration => self.restoration.named_params(),
            ParamGroup::Rewiring => self.rewiring.named_params(),
        }
    }

    /// All parameters in stable group order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        ParamGroup::ALL
            .iter()
            .flat_map(|g| self.group_params(*g))
            .collect()
    }

    pub fn set_trainable(&self, group: ParamGroup, trainable: bool) {
        for (_, p) in self.group_params(group) {
            p.set_requires_grad(trainable);
        }
    }

    /// Little-endian bytes of every parameter in the group, in declaration
    /// order. Used for byte-level freeze assertions.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, p) in self.group_params(group) {
            for v in p.to_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn zero_all_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Independent copy: same values, fresh storage, trainable flags reset.
    pub fn clone_deep(&self) -> ModelBundle {
        let copy = ModelBundle::new(self.config().clone(), 0)
            .expect("config of an existing bundle is valid");
        for ((_, dst), (_, src)) in copy.named_params().iter().zip(self.named_params()) {
            dst.set_data(&src.to_vec());
        }
        for ((_, dst), (_, src)) in copy
            .encoder
            .named_buffers()
            .iter()
            .zip(self.encoder.named_buffers())
        {
            dst.borrow_mut().copy_from_slice(&src.borrow());
        }
        ModelBundle { aux: self.aux, ..copy }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut entries = BTreeMap::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (name, p) in self.named_params() {
            tensors.push((name, p.shape().to_vec(), p.to_vec()));
        }
        for (name, buf) in self.encoder.named_buffers() {
            let v = buf.borrow().clone();
            tensors.push((name, vec![v.len()], v));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape, values) in tensors {
            entries.insert(
                name,
                TensorEntry {
                    shape,
                    dtype: "f32".to_string(),
                    offset: payload.len() * 4,
                    len: values.len(),
                },
            );
            payload.extend_from_slice(&values);
        }
        let manifest = Manifest {
            format_version: CKPT_VERSION,
            model: self.config().clone(),
            aux: self.aux,
            tensors: entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)?;

        let mut file = fs::File::create(path)?;
        file.write_all(CKPT_MAGIC)?;
        file.write_all(&CKPT_VERSION.to_le_bytes())?;
        file.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
        file.write_all(&manifest_json)?;
        let mut bytes = Vec::with_capacity(payload.len() * 4);
        for v in payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, CheckpointError> {
        let raw = fs::read(path)?;
        if raw.len() < CKPT_MAGIC.len() + 6 || &raw[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic(path.display().to_string()));
        }
        let mut at = CKPT_MAGIC.len();
        let version = u16::from_le_bytes([raw[at], raw[at + 1]]);
        at += 2;
        if version != CKPT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mlen = u32::from_le_bytes([raw[at], raw[at + 1], raw[at + 2], raw[at + 3]]) as usize;
        at += 4;
        if raw.len() < at + mlen {
            return Err(CheckpointError::Truncated {
                expected: mlen,
                actual: raw.len().saturating_sub(at),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&raw[at..at + mlen])?;
        at += mlen;
        let payload = &raw[at..];

        let needed: usize = manifest
            .tensors
            .values()
            .map(|e| e.offset + e.len * 4)
            .max()
            .unwrap_or(0);
        if payload.len() < needed {
            return Err(CheckpointError::Truncated {
                expected: needed,
                actual: payload.len(),
            });
        }

        let read_tensor = |entry: &TensorEntry| -> Vec<f32> {
            let bytes = &payload[entry.offset..entry.offset + entry.len * 4];
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };

        let bundle = ModelBundle::new(manifest.model.clone(), 0)?;
        for (name, p) in bundle.named_params() {
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if entry.shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: entry.shape.clone(),
                    expected: p.shape().to_vec(),
                });
            }
            p.set_data(&read_tensor(entry));
        }
        for (name, buf) in bundle.encoder.named_buffers() {
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            buf.borrow_mut().copy_from_slice(&read_tensor(entry));
        }
        Ok(ModelBundle {
            aux: manifest.aux,
            ..bundle
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    model: EncoderConfig,
    aux: AuxState,
    tensors: BTreeMap<String, TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bundle() -> ModelBundle {
        ModelBundle::new(EncoderConfig::new(3, 16, 4), 42).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bundle = small_bundle();
        // make running stats non-trivial
        bundle.encoder.named_buffers()[0].1.borrow_mut()[0] = 0.125;
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        for ((name, a), (_, b)) in bundle.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(a.to_vec(), b.to_vec(), "mismatch in {name}");
        }
        for ((name, a), (_, b)) in bundle
            .encoder
            .named_buffers()
            .iter()
            .zip(loaded.encoder.named_buffers())
        {
            assert_eq!(*a.borrow(), *b.borrow(), "mismatch in {name}");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"NOTACKPT__ and then some").unwrap();
        assert!(matches!(
            ModelBundle::load(&path),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        small_bundle().save(&path).unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 64]).unwrap();
        assert!(matches!(
            ModelBundle::load(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn clone_deep_is_independent() {
        let bundle = small_bundle();
        let copy = bundle.clone_deep();
        let (_, first) = &bundle.named_params()[0];
        let before = copy.named_params()[0].1.to_vec();
        first.update_data(|d| d[0] += 1.0);
        assert_eq!(copy.named_params()[0].1.to_vec(), before);
    }

    #[test]
    fn group_bytes_tracks_mutation() {
        let bundle = small_bundle();
        let before = bundle.group_bytes(ParamGroup::Restoration);
        assert_eq!(before, bundle.group_bytes(ParamGroup::Restoration));
        bundle.restoration.named_params()[0].1.update_data(|d| d[0] += 0.5);
        assert_ne!(before, bundle.group_bytes(ParamGroup::Restoration));
    }
}
