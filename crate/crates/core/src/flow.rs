//! Flow-matching targets, the training loss with context dropout, and the
//! training loop.

use std::time::Instant;

use ndarray::{Array, Array2, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Init, ModelConfig, ModelInput, ModelParams};
use crate::error::{Error, Result};
use crate::latentseq::{build_sequence, TokenGrid};
use crate::nn::{self, Visit};
use crate::schedule::{self, RFSchedule, TimestepDistribution};

/// Rectified-flow regression target `eps - x`.
pub fn rf_target<D: Dimension>(x: &Array<f64, D>, eps: &Array<f64, D>) -> Result<Array<f64, D>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch { left: x.shape().to_vec(), right: eps.shape().to_vec() });
    }
    Ok(eps - x)
}

/// General conditional flow-matching target
/// `(a'/a) z_t - (b/2) lambda' eps`, evaluated from the schedule's
/// coefficients and the analytic log-SNR derivative.
pub fn cfm_target_general<D: Dimension>(
    z_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: f64,
    schedule: &RFSchedule,
) -> Result<Array<f64, D>> {
    if z_t.shape() != eps.shape() {
        return Err(Error::ShapeMismatch { left: z_t.shape().to_vec(), right: eps.shape().to_vec() });
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("general CFM target needs t in (0, 1), got {t}")));
    }
    let zc = schedule.da(t) / schedule.a(t);
    let ec = 0.5 * schedule.b(t) * schedule.dlog_snr(t);
    let mut out = z_t.clone();
    out.zip_mut_with(eps, |z, &e| *z = zc * *z - ec * e);
    Ok(out)
}

/// One training triple in normalized latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub target: TokenGrid,
    pub contexts: Vec<TokenGrid>,
    pub text: Vec<usize>,
}

/// The random quantities consumed by one example's loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub eps: Array2<f64>,
    pub drop_context: bool,
}

impl Draw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, ex: &TrainExample, cfg: &TrainConfig) -> Self {
        let t = schedule::sample_one_t(&cfg.dist, rng);
        let eps = Array2::from_shape_simple_fn(ex.target.tokens.raw_dim(), || rng.sample(StandardNormal));
        let drop_context = rng.random::<f64>() < cfg.context_dropout_prob;
        Draw { t, eps, drop_context }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Linear warmup length; the rate then follows a cosine down to
    /// `final_lr_fraction * learning_rate`.
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub dist: TimestepDistribution,
    pub context_dropout_prob: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            grad_clip: 1.0,
            dist: TimestepDistribution::identity(),
            context_dropout_prob: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.context_dropout_prob) {
            return Err(Error::Config("context_dropout_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.final_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,loss,grad_norm,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{:.10e},{:.10e},{:.3}", self.step, self.loss, self.grad_norm, self.seconds)
    }
}

/// Mean squared error of one example and, optionally, its gradients.
pub fn example_loss(
    params: &ModelParams,
    ex: &TrainExample,
    draw: &Draw,
    with_grad: bool,
) -> Result<(f64, Option<ModelParams>)> {
    let x = &ex.target.tokens;
    let z = schedule::interpolate(x, &draw.eps, draw.t)?.z_t;
    let noisy = TokenGrid::new(ex.target.grid_h, ex.target.grid_w, z)?;
    let contexts: &[TokenGrid] = if draw.drop_context { &[] } else { &ex.contexts };
    let seq = build_sequence(&noisy, contexts)?;
    let input = ModelInput {
        image_tokens: seq.tokens.view(),
        target_len: seq.target_len,
        positions: &seq.positions,
        text_tokens: &ex.text,
        t: draw.t,
    };
    let target = rf_target(x, &draw.eps)?;
    if with_grad {
        let (v, cache) = params.forward_cached(&input)?;
        let diff = v - &target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let dout = diff.mapv(|d| 2.0 * d / n);
        Ok((loss, Some(params.backward(&input, &cache, dout.view()))))
    } else {
        let v = params.forward(&input)?;
        let diff = v - &target;
        Ok((diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64, None))
    }
}

/// Batch loss (mean over examples) and gradients for explicit draws.
///
/// Per-example work may run in parallel; results are reduced in batch order
/// so the output does not depend on the thread count.
pub fn loss_with_draws(params: &ModelParams, batch: &[TrainExample], draws: &[Draw]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Domain(format!("{} examples but {} draws", batch.len(), draws.len())));
    }
    let parts: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(ex, d)| example_loss(params, ex, d, true).map(|(l, g)| (l, g.expect("requested"))))
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for (l, g) in &parts {
        total += l;
        nn::add_assign(&mut grads, g);
    }
    nn::scale(&mut grads, 1.0 / b);
    Ok((total / b, grads))
}

/// Draws `t`, noise and the context-dropout coin per example, then evaluates
/// the rectified flow-matching loss and its gradients.
pub fn loss<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[TrainExample],
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let draws: Vec<Draw> = batch.iter().map(|ex| Draw::sample(rng, ex, cfg)).collect();
    loss_with_draws(params, batch, &draws)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        Self { cfg, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut gs = Vec::new();
        grads.visit("", &mut gs);
        let ps = nn::tensors_mut(params);
        let ms = nn::tensors_mut(&mut self.m);
        let vs = nn::tensors_mut(&mut self.v);
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Source of the initial parameters for [`train`].
pub enum Start {
    Fresh(ModelConfig),
    From(ModelParams),
}

/// Runs `cfg.steps` optimizer steps over `dataset`, sampling each batch
/// uniformly with replacement.
///
/// Determinism: given the same seed, config and dataset the returned
/// parameters are bit-identical. Checkpoints go to `on_checkpoint` every
/// `checkpoint_every` steps and always after the last step.
pub fn train(
    cfg: &TrainConfig,
    dataset: &[TrainExample],
    start: Start,
    mut on_checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<ModelParams> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match start {
        Start::Fresh(model_cfg) => ModelParams::new(model_cfg, Init::ZeroGated, &mut init_rng)?,
        Start::From(p) => p,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(&params, cfg.adam);
    let started = Instant::now();
    for step in 0..cfg.steps {
        let batch: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
            .collect();
        let (value, mut grads) = loss(&params, &batch, &mut rng, cfg)?;
        let grad_norm = nn::l2_norm(&grads);
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { context: "training loss", step });
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            nn::scale(&mut grads, cfg.grad_clip / grad_norm);
        }
        opt.update(&mut params, &grads, cfg.lr_at(step));
        on_report(&LossReport { step, loss: value, grad_norm, seconds: started.elapsed().as_secs_f64() });
        let last = step + 1 == cfg.steps;
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(params)
}
