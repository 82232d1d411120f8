//! Euler ODE sampling from noise (t = 1) to data (t = 0), classifier-free
//! guidance over the context images, and chained multi-turn editing.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelInput, ModelParams};
use crate::error::{Error, Result};
use crate::latentseq::{build_sequence, decode, encode, ImageTensor, LatentStats, TokenGrid};
use crate::schedule::{shift_timestep, TimestepDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub dist: TimestepDistribution,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 64, dist: TimestepDistribution::identity(), guidance_scale: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance_scale must be finite and >= 0, got {}", self.guidance_scale)));
        }
        Ok(())
    }
}

/// `num_steps + 1` times running from 1 to 0, a uniform grid pushed through
/// [`shift_timestep`].
pub fn timestep_grid(cfg: &SamplerConfig) -> Vec<f64> {
    let n = cfg.num_steps.max(1);
    (0..=n)
        .map(|k| {
            if k == 0 {
                1.0
            } else if k == n {
                0.0
            } else {
                shift_timestep(1.0 - k as f64 / n as f64, &cfg.dist)
            }
        })
        .collect()
}

/// Integrates `dz/dt = v(z, t)` with explicit Euler steps along `grid`.
/// The callback receives the step index as its third argument.
pub fn euler<F>(mut z: Array2<f64>, grid: &[f64], mut velocity: F) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, f64, usize) -> Result<Array2<f64>>,
{
    for (k, w) in grid.windows(2).enumerate() {
        let v = velocity(&z, w[0], k)?;
        if v.shape() != z.shape() {
            return Err(Error::ShapeMismatch { left: z.shape().to_vec(), right: v.shape().to_vec() });
        }
        z.scaled_add(w[1] - w[0], &v);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "sampler trajectory", step: k });
        }
    }
    Ok(z)
}

fn velocity(params: &ModelParams, z: &TokenGrid, contexts: &[TokenGrid], text: &[usize], t: f64) -> Result<Array2<f64>> {
    let seq = build_sequence(z, contexts)?;
    params.forward(&ModelInput {
        image_tokens: seq.tokens.view(),
        target_len: seq.target_len,
        positions: &seq.positions,
        text_tokens: text,
        t,
    })
}

/// Draws a target grid of `target_dims` in normalized latent space.
///
/// With `guidance_scale > 0` each step evaluates the model with and without
/// the contexts and combines `v_u + g (v_c - v_u)`; otherwise only the
/// conditional velocity is used.
pub fn sample(
    params: &ModelParams,
    contexts: &[TokenGrid],
    instruction: &[usize],
    target_dims: (usize, usize),
    cfg: &SamplerConfig,
) -> Result<TokenGrid> {
    cfg.validate()?;
    let (gh, gw) = target_dims;
    let c = params.config.latent_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z0 = Array2::from_shape_simple_fn((gh * gw, c), || rng.sample(StandardNormal));
    let g = cfg.guidance_scale;
    let z = euler(z0, &timestep_grid(cfg), |z, t, _| {
        let grid = TokenGrid::new(gh, gw, z.clone())?;
        let v_c = velocity(params, &grid, contexts, instruction, t)?;
        if g > 0.0 {
            let v_u = if contexts.is_empty() { v_c.clone() } else { velocity(params, &grid, &[], instruction, t)? };
            Ok(&v_u + &((&v_c - &v_u) * g))
        } else {
            Ok(v_c)
        }
    })?;
    TokenGrid::new(gh, gw, z)
}

/// A trained velocity network with the codec settings it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub params: ModelParams,
    pub stats: LatentStats,
    pub patch: usize,
    /// Output image shape `[height, width, channels]` for generation
    /// without a context image.
    pub image_shape: [usize; 3],
}

impl FlowModel {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.image_shape;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch {}", self.patch)));
        }
        let channels = c * self.patch * self.patch;
        if channels != self.params.config.latent_channels || channels != self.stats.channels() {
            return Err(Error::Config(format!(
                "codec gives {channels} latent channels, model has {}, stats have {}",
                self.params.config.latent_channels,
                self.stats.channels()
            )));
        }
        Ok(())
    }

    /// Edits (or, with no contexts, generates) one image in pixel space.
    pub fn edit(&self, contexts: &[&ImageTensor], instruction: &[usize], cfg: &SamplerConfig) -> Result<ImageTensor> {
        let grids = contexts
            .iter()
            .map(|img| encode(img, self.patch).map(|g| self.stats.normalize(&g)))
            .collect::<Result<Vec<_>>>()?;
        let dims = match grids.first() {
            Some(g) => g.dims(),
            None => (self.image_shape[0] / self.patch, self.image_shape[1] / self.patch),
        };
        let out = sample(&self.params, &grids, instruction, dims, cfg)?;
        Ok(decode(&self.stats.denormalize(&out), self.patch)?.clamped())
    }
}

/// Applies `instructions` in turn, feeding output k back as the context for
/// instruction k + 1. Turn k samples with seed `cfg.seed + k`.
pub fn edit_loop(
    model: &FlowModel,
    initial_image: &ImageTensor,
    instructions: &[Vec<usize>],
    cfg: &SamplerConfig,
) -> Result<Vec<ImageTensor>> {
    if instructions.is_empty() {
        return Err(Error::Domain("edit loop needs at least one instruction".into()));
    }
    let mut outputs: Vec<ImageTensor> = Vec::with_capacity(instructions.len());
    for (k, ins) in instructions.iter().enumerate() {
        let context = outputs.last().unwrap_or(initial_image);
        let turn_cfg = SamplerConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let next = model.edit(&[context], ins, &turn_cfg)?;
        outputs.push(next);
    }
    Ok(outputs)
}
