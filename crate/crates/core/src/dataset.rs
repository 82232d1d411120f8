//! Edit-example dataset container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FEDDATA\0"
//! version    u32      DATASET_VERSION
//! header     u64 length + UTF-8 JSON (DatasetHeader)
//! per record (header.count times):
//!   meta     u64 length + UTF-8 JSON (EditExample without pixels)
//!   context  image
//!   target   image
//! image, raw storage:  u32 height, u32 width, u32 channels,
//!                      u64 count + f32 values (HWC order)
//! image, png storage:  u64 length + PNG bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::flow::TrainExample;
use crate::latentseq::{encode, ImageTensor, LatentStats, TokenGrid};
use crate::toybench::{EditExample, GenConfig, Word};

pub const DATASET_MAGIC: &[u8; 8] = b"FEDDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    #[default]
    Raw,
    Png,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub patch: usize,
    pub stats: LatentStats,
    pub vocab: Vec<String>,
    pub storage: Storage,
    pub generator: GenConfig,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<EditExample>,
}

pub fn vocab_words() -> Vec<String> {
    Word::all().into_iter().map(Word::text).collect()
}

impl Dataset {
    /// Wraps generated examples, computing per-channel latent statistics over
    /// every context and target image.
    pub fn new(examples: Vec<EditExample>, patch: usize, storage: Storage, generator: GenConfig, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Domain("dataset needs at least one example".into()));
        }
        let mut grids = Vec::with_capacity(2 * examples.len());
        for ex in &examples {
            grids.push(encode(&ex.context_image(), patch)?);
            grids.push(encode(&ex.target_image(), patch)?);
        }
        let stats = LatentStats::from_grids(&grids)?;
        let header = DatasetHeader { patch, stats, vocab: vocab_words(), storage, generator, seed, count: examples.len() };
        Ok(Self { header, examples })
    }

    /// Normalized training triples; contexts always present here, dropout
    /// happens inside the loss.
    pub fn train_examples(&self) -> Result<Vec<TrainExample>> {
        let h = &self.header;
        let norm = |img: &ImageTensor| -> Result<TokenGrid> { Ok(h.stats.normalize(&encode(img, h.patch)?)) };
        self.examples
            .iter()
            .map(|ex| {
                Ok(TrainExample {
                    target: norm(&ex.target_image())?,
                    contexts: vec![norm(&ex.context_image())?],
                    text: ex.tokens.clone(),
                })
            })
            .collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let g = self.header.generator.grid;
        [g.height(), g.width(), 3]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.json(&self.header)?;
        for ex in &self.examples {
            w.json(ex)?;
            for img in [ex.context_image(), ex.target_image()] {
                match self.header.storage {
                    Storage::Raw => {
                        w.u32(img.height as u32);
                        w.u32(img.width as u32);
                        w.u32(img.channels as u32);
                        w.f32s(&img.data);
                    }
                    Storage::Png => w.bytes(&img.to_png_bytes()?),
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open("dataset", data, DATASET_MAGIC)?;
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let header: DatasetHeader = r.json()?;
        if header.vocab != vocab_words() {
            return Err(Error::format("dataset", "instruction vocabulary differs from this build"));
        }
        let mut examples = Vec::with_capacity(header.count.min(1 << 20));
        for _ in 0..header.count {
            let mut ex: EditExample = r.json()?;
            let mut read_image = || -> Result<ImageTensor> {
                match header.storage {
                    Storage::Raw => {
                        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                        ImageTensor::new(c, h, w, r.f32s()?)
                    }
                    Storage::Png => ImageTensor::from_png_bytes(r.bytes()?),
                }
            };
            ex.context = Some(read_image()?);
            ex.target = Some(read_image()?);
            examples.push(ex);
        }
        r.finish()?;
        Ok(Self { header, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::generate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(storage: Storage) -> Dataset {
        let cfg = GenConfig::default();
        let exs = generate(&mut ChaCha8Rng::seed_from_u64(3), 12, &cfg).unwrap();
        Dataset::new(exs, 4, storage, cfg, 3).unwrap()
    }

    #[test]
    fn raw_and_png_round_trip() {
        for storage in [Storage::Raw, Storage::Png] {
            let ds = dataset(storage);
            let bytes = ds.to_bytes().unwrap();
            let back = Dataset::from_bytes(&bytes).unwrap();
            assert_eq!(back, ds);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn generation_is_byte_stable() {
        assert_eq!(dataset(Storage::Raw).to_bytes().unwrap(), dataset(Storage::Raw).to_bytes().unwrap());
    }

    #[test]
    fn train_examples_are_standardized() {
        let ds = dataset(Storage::Raw);
        let tr = ds.train_examples().unwrap();
        assert_eq!(tr.len(), 12);
        let grids: Vec<_> = tr.iter().flat_map(|t| [t.target.clone(), t.contexts[0].clone()]).collect();
        let s = LatentStats::from_grids(&grids).unwrap();
        for (m, sd) in s.mean.iter().zip(&s.std) {
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-6 || *sd < 2e-3);
        }
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = dataset(Storage::Png).to_bytes().unwrap();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }
}
