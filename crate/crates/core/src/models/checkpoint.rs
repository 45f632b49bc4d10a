//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ECHODIFF"
//! version  u32
//! meta_len u64
//! meta     meta_len bytes of UTF-8 JSON
//! blocks   f32 values, one block per entry of meta.blocks, in that order
//! ```
//!
//! Blocks are the generator parameters, then the discriminator parameters
//! (both in declaration order), then the generator optimizer moments `m`
//! and `v`, then the discriminator optimizer moments.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DiscriminatorNet, GeneratorNet, ModelConfig, ModelError};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECHODIFF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("config fingerprint mismatch: checkpoint {checkpoint}, session {session}")]
    FingerprintMismatch { checkpoint: String, session: String },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: GeneratorNet<f32>,
    pub discriminator: DiscriminatorNet<f32>,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub schedule: NoiseSchedule,
    /// Completed training steps.
    pub step: u64,
    pub config_fingerprint: String,
    /// Canonical text of the run configuration that produced this checkpoint.
    pub config_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    schedule: ScheduleParams,
    config_fingerprint: String,
    config_text: String,
    step: u64,
    gen_opt_step: u64,
    disc_opt_step: u64,
    blocks: Vec<BlockInfo>,
}

impl Checkpoint {
    /// Fresh optimizer state around initialized networks.
    pub fn new(
        generator: GeneratorNet<f32>,
        discriminator: DiscriminatorNet<f32>,
        schedule: NoiseSchedule,
        config_fingerprint: String,
        config_text: String,
    ) -> Self {
        let gen_opt = AdamState::for_params(generator.params());
        let disc_opt = AdamState::for_params(discriminator.params());
        Self {
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            schedule,
            step: 0,
            config_fingerprint,
            config_text,
        }
    }

    /// Rejects a session whose configuration differs, unless `allow_mismatch`.
    pub fn ensure_fingerprint(&self, session: &str, allow_mismatch: bool) -> Result<(), CheckpointError> {
        if self.config_fingerprint != session && !allow_mismatch {
            return Err(CheckpointError::FingerprintMismatch {
                checkpoint: self.config_fingerprint.clone(),
                session: session.to_string(),
            });
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        for (prefix, set) in [("gen", self.generator.params()), ("disc", self.discriminator.params())] {
            for (name, t) in set.names().iter().zip(set.tensors()) {
                out.push((format!("{prefix}.{name}"), t.data()));
            }
        }
        for (prefix, opt, set) in [
            ("gen", &self.gen_opt, self.generator.params()),
            ("disc", &self.disc_opt, self.discriminator.params()),
        ] {
            for (moment, values) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, block) in set.names().iter().zip(values) {
                    out.push((format!("{prefix}.adam_{moment}.{name}"), block));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let blocks = self.blocks();
        let meta = Metadata {
            model: self.generator.config().clone(),
            schedule: self.schedule.params(),
            config_fingerprint: self.config_fingerprint.clone(),
            config_text: self.config_text.clone(),
            step: self.step,
            gen_opt_step: self.gen_opt.step,
            disc_opt_step: self.disc_opt.step,
            blocks: blocks
                .iter()
                .map(|(name, b)| BlockInfo {
                    name: name.clone(),
                    len: b.len(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let total: usize = blocks.iter().map(|(_, b)| b.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + meta.len() + total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, b) in blocks {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |msg: &str| CheckpointError::Corrupt(msg.to_string());
        if bytes.len() < 20 {
            return Err(corrupt("file shorter than the fixed header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|l| l.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated metadata block"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;

        let payload = &bytes[meta_end..];
        let expected: usize = meta.blocks.iter().map(|b| b.len.saturating_mul(4)).fold(0usize, usize::saturating_add);
        if payload.len() < expected {
            return Err(corrupt("truncated parameter blocks"));
        }
        if payload.len() > expected {
            return Err(corrupt("trailing bytes after parameter blocks"));
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut read = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };

        let model_err = |e: ModelError| CheckpointError::Corrupt(e.to_string());
        let schedule = meta.schedule.build().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut generator = GeneratorNet::<f32>::new(&meta.model).map_err(model_err)?;
        let mut discriminator = DiscriminatorNet::<f32>::new(&meta.model).map_err(model_err)?;

        let tmp = Checkpoint::new(generator.clone(), discriminator.clone(), schedule.clone(), String::new(), String::new());
        let layout: Vec<(String, usize)> = tmp.blocks().into_iter().map(|(n, b)| (n, b.len())).collect();
        if layout.len() != meta.blocks.len() || layout.iter().zip(&meta.blocks).any(|((n, l), b)| *n != b.name || *l != b.len) {
            return Err(corrupt("parameter layout does not match the stored model configuration"));
        }

        let ng = generator.params().len();
        let nd = discriminator.params().len();
        let mut take_set = |sizes: Vec<usize>| -> Vec<Vec<f32>> { sizes.into_iter().map(&mut read).collect() };
        let gen_sizes: Vec<usize> = generator.params().tensors().iter().map(|t| t.numel()).collect();
        let disc_sizes: Vec<usize> = discriminator.params().tensors().iter().map(|t| t.numel()).collect();
        let gen_vals = take_set(gen_sizes.clone());
        let disc_vals = take_set(disc_sizes.clone());
        let gen_m = take_set(gen_sizes.clone());
        let gen_v = take_set(gen_sizes);
        let disc_m = take_set(disc_sizes.clone());
        let disc_v = take_set(disc_sizes);
        debug_assert_eq!((gen_vals.len(), disc_vals.len()), (ng, nd));

        generator.params_mut().load_values(&gen_vals).map_err(model_err)?;
        discriminator.params_mut().load_values(&disc_vals).map_err(model_err)?;
        Ok(Self {
            generator,
            discriminator,
            gen_opt: AdamState {
                step: meta.gen_opt_step,
                m: gen_m,
                v: gen_v,
            },
            disc_opt: AdamState {
                step: meta.disc_opt_step,
                m: disc_m,
                v: disc_v,
            },
            schedule,
            step: meta.step,
            config_fingerprint: meta.config_fingerprint,
            config_text: meta.config_text,
        })
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            image_side: 16,
            gen_widths: [4, 8, 8],
            disc_widths: [4, 4, 8, 8],
            ..ModelConfig::default()
        };
        let g = GeneratorNet::new(&cfg).unwrap();
        let d = DiscriminatorNet::new(&cfg).unwrap();
        let mut c = Checkpoint::new(g, d, ScheduleParams::default().build().unwrap(), "abc123".into(), "seed = 7\n".into());
        c.step = 42;
        c.gen_opt.step = 3;
        c.gen_opt.m[0][0] = 0.125;
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.generator.params(), c.generator.params());
        assert_eq!(back.discriminator.params(), c.discriminator.params());
        assert_eq!(back.gen_opt, c.gen_opt);
        assert_eq!(back.disc_opt, c.disc_opt);
        assert_eq!(back.schedule, c.schedule);
        assert_eq!((back.step, back.config_fingerprint.as_str()), (42, "abc123"));
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let guide = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let z = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let a = c.generator.predict(&x, &guide, 500, &z).unwrap();
        let b = back.generator.predict(&x, &guide, 500, &z).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distinct_error_classes() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b"ECHO"), Err(CheckpointError::Corrupt(_))));

        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&0u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&old).unwrap_err();
        assert!(matches!(err, CheckpointError::VersionMismatch { found: 0, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('0') && msg.contains('1'));

        let c = sample_checkpoint();
        assert!(c.ensure_fingerprint("abc123", false).is_ok());
        assert!(matches!(c.ensure_fingerprint("zzz", false), Err(CheckpointError::FingerprintMismatch { .. })));
        assert!(c.ensure_fingerprint("zzz", true).is_ok());
    }
}
