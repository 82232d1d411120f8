//! Versioned checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FEDCKPT\0"
//! version    u32      CHECKPOINT_VERSION
//! header     u64 length + UTF-8 JSON (CheckpointHeader)
//! count      u32      number of tensors
//! per tensor:
//!   name     u64 length + UTF-8
//!   ndim     u32, then ndim x u64 dims
//!   data     u64 element count + IEEE-754 f64 values, row-major
//! ```
//!
//! Tensors appear in the parameter visiting order of [`ModelParams`]; names
//! and shapes are checked against the header's model config on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, ModelParams};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::latentseq::LatentStats;
use crate::nn;
use crate::sampler::FlowModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub latent_stats: LatentStats,
    pub patch: usize,
    pub image_shape: [usize; 3],
    pub step: usize,
    pub seed: u64,
    pub build: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub step: usize,
    pub seed: u64,
    pub build: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = CheckpointHeader {
            model: m.params.config.clone(),
            latent_stats: m.stats.clone(),
            patch: m.patch,
            image_shape: m.image_shape,
            step: self.step,
            seed: self.seed,
            build: self.build.clone(),
        };
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.json(&header)?;
        let tensors = nn::tensors(&m.params);
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.bytes(t.name.as_bytes());
            w.u32(t.shape.len() as u32);
            for &d in t.shape {
                w.u64(d as u64);
            }
            w.f64s(t.data);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open("checkpoint", data, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let h: CheckpointHeader = r.json()?;
        h.model.validate()?;
        let mut params = ModelParams::zeros(&h.model);
        let expected: Vec<(String, Vec<usize>)> =
            nn::tensors(&params).into_iter().map(|t| (t.name, t.shape.to_vec())).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::format("checkpoint", format!("{count} tensors, config implies {}", expected.len())));
        }
        let mut slots = nn::tensors_mut(&mut params);
        for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
            let got_name = std::str::from_utf8(r.bytes()?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let ndim = r.u32()? as usize;
            let got_shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if got_name != name || &got_shape != shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("expected tensor {name} {shape:?}, found {got_name} {got_shape:?}"),
                ));
            }
            let values = r.f64s()?;
            if values.len() != slot.len() {
                return Err(Error::format("checkpoint", format!("tensor {name} has {} values", values.len())));
            }
            slot.copy_from_slice(&values);
        }
        drop(slots);
        r.finish()?;
        let model = FlowModel { params, stats: h.latent_stats, patch: h.patch, image_shape: h.image_shape };
        model.validate()?;
        Ok(Self { model, step: h.step, seed: h.seed, build: h.build })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }

    /// Errors unless the stored model config equals `expected`; a differing
    /// rotary setup is reported on its own.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let got = &self.model.params.config;
        if got.rope != expected.rope {
            return Err(Error::Config(format!("checkpoint rope config {:?} differs from {:?}", got.rope, expected.rope)));
        }
        if got != expected {
            return Err(Error::Config(format!("checkpoint model config {got:?} differs from {expected:?}")));
        }
        Ok(())
    }
}
