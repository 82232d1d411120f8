//! The velocity network: token embedders, double-stream blocks with separate
//! image/text weights, fused single-stream blocks, and the final projection.
//!
//! The attention sequence is always `[text | image]`, with image tokens
//! ordered `[target | context_1 | ... | context_N]`. Text tokens carry the
//! origin position, so rotary embedding leaves them untouched. Only target
//! rows reach the output projection.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, impl_visit, AttentionCache, HeadRmsCache, Linear};
use crate::positions::{PositionTriplet, RopeConfig, RopeTables};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub depth_double: usize,
    pub depth_single: usize,
    pub instruction_vocab: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    /// Longest instruction; each slot has a learned embedding so word order
    /// is visible to the model.
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    pub rope: RopeConfig,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_time_dim() -> usize {
    64
}

fn default_max_text_len() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(48, 128, 4, 2, 4, crate::toybench::VOCAB_SIZE)
    }
}

impl ModelConfig {
    /// A config with the default rotary split for the resulting head size.
    pub fn new(
        latent_channels: usize,
        model_dim: usize,
        num_heads: usize,
        depth_double: usize,
        depth_single: usize,
        instruction_vocab: usize,
    ) -> Self {
        let head_dim = model_dim / num_heads.max(1);
        let rope = RopeConfig::for_head_dim(head_dim).unwrap_or(RopeConfig {
            head_dim,
            axis_split: [0, 0, 0],
            base_freq: 10_000.0,
        });
        Self {
            latent_channels,
            model_dim,
            num_heads,
            depth_double,
            depth_single,
            instruction_vocab,
            mlp_ratio: default_mlp_ratio(),
            time_embed_dim: default_time_dim(),
            max_text_len: default_max_text_len(),
            rope,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.model_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(Error::Config(format!(
                "rope head_dim {} does not match model head_dim {}",
                self.rope.head_dim,
                self.head_dim()
            )));
        }
        self.rope.validate()?;
        if self.latent_channels == 0 || self.instruction_vocab == 0 || self.max_text_len == 0 {
            return Err(Error::Config("latent_channels, instruction_vocab and max_text_len must be > 0".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and > 0".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must give a positive hidden size".into()));
        }
        Ok(())
    }
}

/// How freshly constructed parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Xavier weights with zero-initialized modulation and output projection:
    /// every block starts as the identity and the model outputs zero.
    ZeroGated,
    /// Dense weights drawn from `N(0, gain^2 / fan_in)`, norm gains from
    /// `N(1, gain^2)`, embeddings from `N(0, 1)`; used for gradient checks.
    Random(f64),
}

fn make_linear<R: Rng + ?Sized>(input: usize, output: usize, init: Init, gated: bool, rng: &mut R) -> Linear {
    match init {
        Init::Random(gain) => Linear::normal(input, output, gain / (input as f64).sqrt(), rng),
        Init::ZeroGated if gated => Linear::zeros(input, output),
        Init::ZeroGated => Linear::xavier(input, output, rng),
    }
}

fn make_gain<R: Rng + ?Sized>(dim: usize, init: Init, rng: &mut R) -> Array1<f64> {
    match init {
        Init::Random(std) => {
            let n = Normal::new(1.0, std).expect("valid std");
            Array1::from_shape_simple_fn(dim, || n.sample(rng))
        }
        Init::ZeroGated => Array1::ones(dim),
    }
}

/// One stream (image or text) of a double-stream block.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    /// Produces `(shift1, scale1, gate1, shift2, scale2, gate2)`.
    pub modulation: Linear,
    pub qkv: Linear,
    pub q_norm: Array1<f64>,
    pub k_norm: Array1<f64>,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_visit!(StreamWeights { modulation, qkv, q_norm, k_norm, proj, fc1, fc2 });

impl StreamWeights {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, init: Init, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let m = cfg.mlp_hidden();
        Self {
            modulation: make_linear(d, 6 * d, init, true, rng),
            qkv: make_linear(d, 3 * d, init, false, rng),
            q_norm: make_gain(cfg.head_dim(), init, rng),
            k_norm: make_gain(cfg.head_dim(), init, rng),
            proj: make_linear(d, d, init, false, rng),
            fc1: make_linear(d, m, init, false, rng),
            fc2: make_linear(m, d, init, false, rng),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let m = cfg.mlp_hidden();
        Self {
            modulation: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            q_norm: Array1::zeros(cfg.head_dim()),
            k_norm: Array1::zeros(cfg.head_dim()),
            proj: Linear::zeros(d, d),
            fc1: Linear::zeros(d, m),
            fc2: Linear::zeros(m, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleBlock {
    pub img: StreamWeights,
    pub txt: StreamWeights,
}

impl_visit!(DoubleBlock { img, txt });

/// Single-stream block with one fused input linear producing
/// `[q | k | v | mlp_in]` and one fused output linear consuming
/// `[attn_out | gelu(mlp_in)]`, sharing a single `(shift, scale, gate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleBlock {
    pub modulation: Linear,
    pub fused_in: Linear,
    pub q_norm: Array1<f64>,
    pub k_norm: Array1<f64>,
    pub fused_out: Linear,
}

impl_visit!(SingleBlock { modulation, fused_in, q_norm, k_norm, fused_out });

impl SingleBlock {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, init: Init, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let m = cfg.mlp_hidden();
        Self {
            modulation: make_linear(d, 3 * d, init, true, rng),
            fused_in: make_linear(d, 3 * d + m, init, false, rng),
            q_norm: make_gain(cfg.head_dim(), init, rng),
            k_norm: make_gain(cfg.head_dim(), init, rng),
            fused_out: make_linear(d + m, d, init, false, rng),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let m = cfg.mlp_hidden();
        Self {
            modulation: Linear::zeros(d, 3 * d),
            fused_in: Linear::zeros(d, 3 * d + m),
            q_norm: Array1::zeros(cfg.head_dim()),
            k_norm: Array1::zeros(cfg.head_dim()),
            fused_out: Linear::zeros(d + m, d),
        }
    }

    pub fn modulation_params(&self) -> usize {
        nn::param_count(&self.modulation)
    }

    /// Builds the fused equivalent of a parallel block whose attention and
    /// MLP branches share one modulation triple.
    pub fn from_unfused(u: &UnfusedParallelBlock) -> Result<Self> {
        let d = u.proj.input_dim();
        let (attn_mod, mlp_mod) = (u.modulation.w.slice(s![.., ..3 * d]), u.modulation.w.slice(s![.., 3 * d..]));
        let (attn_b, mlp_b) = (u.modulation.b.slice(s![..3 * d]), u.modulation.b.slice(s![3 * d..]));
        if attn_mod != mlp_mod || attn_b != mlp_b {
            return Err(Error::Config("unfused block must share modulation between branches".into()));
        }
        Ok(Self {
            modulation: Linear { w: attn_mod.to_owned(), b: attn_b.to_owned() },
            fused_in: Linear {
                w: concatenate![Axis(1), u.qkv.w, u.fc1.w],
                b: concatenate![Axis(0), u.qkv.b, u.fc1.b],
            },
            q_norm: u.q_norm.clone(),
            k_norm: u.k_norm.clone(),
            fused_out: Linear { w: concatenate![Axis(0), u.proj.w, u.fc2.w], b: &u.proj.b + &u.fc2.b },
        })
    }
}

/// Reference parallel attention+MLP block with separate projections and two
/// modulation triples. Forward only; exists to check the fused block.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfusedParallelBlock {
    /// `(shift_a, scale_a, gate_a, shift_m, scale_m, gate_m)`.
    pub modulation: Linear,
    pub qkv: Linear,
    pub q_norm: Array1<f64>,
    pub k_norm: Array1<f64>,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_visit!(UnfusedParallelBlock { modulation, qkv, q_norm, k_norm, proj, fc1, fc2 });

impl UnfusedParallelBlock {
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let s = StreamWeights::new(cfg, Init::Random(std), rng);
        Self {
            modulation: s.modulation,
            qkv: s.qkv,
            q_norm: s.q_norm,
            k_norm: s.k_norm,
            proj: s.proj,
            fc1: s.fc1,
            fc2: s.fc2,
        }
    }

    /// Copies the attention modulation triple over the MLP one.
    pub fn tie_modulation(&mut self) {
        let d = self.proj.input_dim();
        let w = self.modulation.w.slice(s![.., ..3 * d]).to_owned();
        let b = self.modulation.b.slice(s![..3 * d]).to_owned();
        self.modulation.w.slice_mut(s![.., 3 * d..]).assign(&w);
        self.modulation.b.slice_mut(s![3 * d..]).assign(&b);
    }

    pub fn modulation_params(&self) -> usize {
        nn::param_count(&self.modulation)
    }

    pub fn forward(&self, x: ArrayView2<f64>, cond: ArrayView1<f64>, rope: &RopeTables, heads: usize) -> Array2<f64> {
        let d = x.ncols();
        let m = self.modulation.forward_vec(cond);
        let (ln, _) = nn::layer_norm(x);
        let ha = nn::modulate(ln.view(), chunk(&m, 0, d), chunk(&m, 1, d));
        let hm = nn::modulate(ln.view(), chunk(&m, 3, d), chunk(&m, 4, d));
        let qkv = self.qkv.forward(ha.view());
        let (mut q, _) = nn::head_rms_norm(qkv.slice(s![.., ..d]), self.q_norm.view());
        let (mut k, _) = nn::head_rms_norm(qkv.slice(s![.., d..2 * d]), self.k_norm.view());
        rope.apply(&mut q.view_mut(), false);
        rope.apply(&mut k.view_mut(), false);
        let (o, _) = nn::attention(q.view(), k.view(), qkv.slice(s![.., 2 * d..]), heads);
        let a = self.proj.forward(o.view());
        let f = self.fc2.forward(self.fc1.forward(hm.view()).mapv(nn::gelu).view());
        let mut out = x.to_owned();
        out += &(&a * &chunk(&m, 2, d));
        out += &(&f * &chunk(&m, 5, d));
        out
    }
}

fn chunk(m: &Array1<f64>, i: usize, d: usize) -> ArrayView1<'_, f64> {
    m.slice(s![i * d..(i + 1) * d])
}

/// All trainable tensors of the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub img_in: Linear,
    pub txt_embed: Array2<f64>,
    pub txt_slot: Array2<f64>,
    pub time_in: Linear,
    pub time_out: Linear,
    pub txt_pool: Linear,
    pub double: Vec<DoubleBlock>,
    pub single: Vec<SingleBlock>,
    /// Produces `(shift, scale)` for the output layer norm.
    pub final_mod: Linear,
    pub final_out: Linear,
}

impl_visit!(ModelParams { img_in, txt_embed, txt_slot, time_in, time_out, txt_pool, double, single, final_mod, final_out });

/// One forward call's inputs.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// `[target | contexts]` latent tokens, `tokens x latent_channels`.
    pub image_tokens: ArrayView2<'a, f64>,
    pub target_len: usize,
    pub positions: &'a [PositionTriplet],
    pub text_tokens: &'a [usize],
    pub t: f64,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let c = config.latent_channels;
        let embed = Normal::new(0.0, 1.0).expect("valid std");
        Ok(Self {
            img_in: make_linear(c, d, init, false, rng),
            txt_embed: Array2::from_shape_simple_fn((config.instruction_vocab, d), || embed.sample(rng)),
            txt_slot: Array2::from_shape_simple_fn((config.max_text_len, d), || embed.sample(rng)),
            time_in: make_linear(config.time_embed_dim, d, init, false, rng),
            time_out: make_linear(d, d, init, false, rng),
            txt_pool: make_linear(d, d, init, false, rng),
            double: (0..config.depth_double)
                .map(|_| DoubleBlock {
                    img: StreamWeights::new(&config, init, rng),
                    txt: StreamWeights::new(&config, init, rng),
                })
                .collect(),
            single: (0..config.depth_single).map(|_| SingleBlock::new(&config, init, rng)).collect(),
            final_mod: make_linear(d, 2 * d, init, true, rng),
            final_out: make_linear(d, c, init, true, rng),
            config,
        })
    }

    /// A parameter tree of zeros with the same structure, used for gradients.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let c = config.latent_channels;
        Self {
            img_in: Linear::zeros(c, d),
            txt_embed: Array2::zeros((config.instruction_vocab, d)),
            txt_slot: Array2::zeros((config.max_text_len, d)),
            time_in: Linear::zeros(config.time_embed_dim, d),
            time_out: Linear::zeros(d, d),
            txt_pool: Linear::zeros(d, d),
            double: (0..config.depth_double)
                .map(|_| DoubleBlock { img: StreamWeights::zeros(config), txt: StreamWeights::zeros(config) })
                .collect(),
            single: (0..config.depth_single).map(|_| SingleBlock::zeros(config)).collect(),
            final_mod: Linear::zeros(d, 2 * d),
            final_out: Linear::zeros(d, c),
            config: config.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(self)
    }

    /// Velocity for every target token (`target_len x latent_channels`).
    pub fn forward(&self, input: &ModelInput) -> Result<Array2<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Forward pass that also returns the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, input: &ModelInput) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let n_txt = input.text_tokens.len();

        // conditioning vector
        let temb = nn::timestep_embedding(input.t, cfg.time_embed_dim);
        let t_hidden = self.time_in.forward_vec(temb.view());
        let t_act = t_hidden.mapv(nn::silu);
        let mut vec = self.time_out.forward_vec(t_act.view());
        let txt_rows = self.txt_embed.select(Axis(0), input.text_tokens) + self.txt_slot.slice(s![..n_txt, ..]);
        let pooled = if n_txt == 0 { Array1::zeros(d) } else { txt_rows.mean_axis(Axis(0)).expect("non-empty") };
        vec += &self.txt_pool.forward_vec(pooled.view());
        let cond = vec.mapv(nn::silu);

        let mut all_pos = vec![PositionTriplet::ORIGIN; n_txt];
        all_pos.extend_from_slice(input.positions);
        let rope = cfg.rope.tables(&all_pos);

        let mut x_img = self.img_in.forward(input.image_tokens);
        let mut x_txt = txt_rows;
        let mut double_caches = Vec::with_capacity(self.double.len());
        for block in &self.double {
            let (t_out, i_out, cache) = double_forward(block, x_txt.view(), x_img.view(), cond.view(), &rope, heads);
            double_caches.push(cache);
            x_txt = t_out;
            x_img = i_out;
        }

        let mut x = concatenate![Axis(0), x_txt, x_img];
        let mut single_caches = Vec::with_capacity(self.single.len());
        for block in &self.single {
            let (out, cache) = single_forward(block, x.view(), cond.view(), &rope, heads);
            single_caches.push(cache);
            x = out;
        }

        let target = x.slice(s![n_txt..n_txt + input.target_len, ..]).to_owned();
        let fm = self.final_mod.forward_vec(cond.view());
        let (ln, inv) = nn::layer_norm(target.view());
        let h = nn::modulate(ln.view(), chunk(&fm, 0, d), chunk(&fm, 1, d));
        let out = self.final_out.forward(h.view());

        let cache = ForwardCache {
            temb,
            t_hidden,
            t_act,
            vec,
            cond,
            pooled,
            rope,
            double: double_caches,
            single: single_caches,
            seq_len: x.nrows(),
            final_mod: fm,
            final_ln: ln,
            final_inv: inv,
            final_h: h,
        };
        Ok((out, cache))
    }

    /// Gradients of `sum(dout * forward(input))` with respect to every parameter.
    pub fn backward(&self, input: &ModelInput, cache: &ForwardCache, dout: ArrayView2<f64>) -> ModelParams {
        let mut g = self.zeros_like();
        self.backward_into(input, cache, dout, &mut g);
        g
    }

    pub fn backward_into(&self, input: &ModelInput, cache: &ForwardCache, dout: ArrayView2<f64>, g: &mut ModelParams) {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let n_txt = input.text_tokens.len();
        let mut dcond = Array1::<f64>::zeros(d);

        // output layer
        let dh = self.final_out.backward(cache.final_h.view(), dout, &mut g.final_out);
        let (dln, dshift, dscale) = nn::modulate_backward(cache.final_ln.view(), chunk(&cache.final_mod, 1, d), dh.view());
        let dfm = concatenate![Axis(0), dshift, dscale];
        dcond += &self.final_mod.backward_vec(cache.cond.view(), dfm.view(), &mut g.final_mod);
        let dtarget = nn::layer_norm_backward(cache.final_ln.view(), cache.final_inv.view(), dln.view());

        let mut dx = Array2::<f64>::zeros((cache.seq_len, d));
        dx.slice_mut(s![n_txt..n_txt + input.target_len, ..]).assign(&dtarget);

        for ((block, bc), gb) in self.single.iter().zip(&cache.single).zip(g.single.iter_mut()).rev() {
            dx = single_backward(block, bc, dx.view(), cache.cond.view(), &cache.rope, gb, &mut dcond);
        }

        let mut dx_txt = dx.slice(s![..n_txt, ..]).to_owned();
        let mut dx_img = dx.slice(s![n_txt.., ..]).to_owned();
        for ((block, bc), gb) in self.double.iter().zip(&cache.double).zip(g.double.iter_mut()).rev() {
            let (dt, di) = double_backward(
                block,
                bc,
                dx_txt.view(),
                dx_img.view(),
                cache.cond.view(),
                &cache.rope,
                gb,
                &mut dcond,
            );
            dx_txt = dt;
            dx_img = di;
        }
        self.img_in.backward_params(input.image_tokens, dx_img.view(), &mut g.img_in);

        // conditioning vector back to its sources
        let dvec = &dcond * &cache.vec.mapv(nn::silu_grad);
        let dpooled = self.txt_pool.backward_vec(cache.pooled.view(), dvec.view(), &mut g.txt_pool);
        let dt_act = self.time_out.backward_vec(cache.t_act.view(), dvec.view(), &mut g.time_out);
        let dt_hidden = &dt_act * &cache.t_hidden.mapv(nn::silu_grad);
        self.time_in.backward_vec(cache.temb.view(), dt_hidden.view(), &mut g.time_in);

        if n_txt > 0 {
            let share = &dpooled / n_txt as f64;
            for (row, &tok) in input.text_tokens.iter().enumerate() {
                let grad = &dx_txt.row(row) + &share;
                g.txt_embed.row_mut(tok).scaled_add(1.0, &grad);
                g.txt_slot.row_mut(row).scaled_add(1.0, &grad);
            }
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let cfg = &self.config;
        if input.image_tokens.ncols() != cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                left: input.image_tokens.shape().to_vec(),
                right: vec![input.image_tokens.nrows(), cfg.latent_channels],
            });
        }
        if input.positions.len() != input.image_tokens.nrows() {
            return Err(Error::ShapeMismatch {
                left: vec![input.positions.len()],
                right: vec![input.image_tokens.nrows()],
            });
        }
        if input.target_len == 0 || input.target_len > input.image_tokens.nrows() {
            return Err(Error::Domain(format!(
                "target_len {} out of range for {} image tokens",
                input.target_len,
                input.image_tokens.nrows()
            )));
        }
        if input.text_tokens.len() > cfg.max_text_len {
            return Err(Error::Domain(format!(
                "{} instruction tokens exceed max_text_len {}",
                input.text_tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(&tok) = input.text_tokens.iter().find(|&&t| t >= cfg.instruction_vocab) {
            return Err(Error::Domain(format!("instruction token {tok} outside vocabulary {}", cfg.instruction_vocab)));
        }
        Ok(())
    }
}

/// Activations saved by [`ModelParams::forward_cached`].
pub struct ForwardCache {
    temb: Array1<f64>,
    t_hidden: Array1<f64>,
    t_act: Array1<f64>,
    vec: Array1<f64>,
    cond: Array1<f64>,
    pooled: Array1<f64>,
    rope: RopeTables,
    double: Vec<DoubleCache>,
    single: Vec<SingleCache>,
    seq_len: usize,
    final_mod: Array1<f64>,
    final_ln: Array2<f64>,
    final_inv: Array1<f64>,
    final_h: Array2<f64>,
}

struct StreamPre {
    m: Array1<f64>,
    ln1: Array2<f64>,
    inv1: Array1<f64>,
    h1: Array2<f64>,
    qc: HeadRmsCache,
    kc: HeadRmsCache,
}

struct StreamPost {
    o: Array2<f64>,
    a: Array2<f64>,
    ln2: Array2<f64>,
    inv2: Array1<f64>,
    h2: Array2<f64>,
    f1: Array2<f64>,
    act: Array2<f64>,
    f2: Array2<f64>,
}

struct DoubleCache {
    txt_pre: StreamPre,
    img_pre: StreamPre,
    txt_post: StreamPost,
    img_post: StreamPost,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: AttentionCache,
}

struct SingleCache {
    m: Array1<f64>,
    ln: Array2<f64>,
    inv: Array1<f64>,
    h: Array2<f64>,
    qc: HeadRmsCache,
    kc: HeadRmsCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: AttentionCache,
    cat: Array2<f64>,
    mlp_in: Array2<f64>,
    y: Array2<f64>,
}

fn stream_pre(
    w: &StreamWeights,
    x: ArrayView2<f64>,
    cond: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, StreamPre) {
    let d = x.ncols();
    let m = w.modulation.forward_vec(cond);
    let (ln1, inv1) = nn::layer_norm(x);
    let h1 = nn::modulate(ln1.view(), chunk(&m, 0, d), chunk(&m, 1, d));
    let qkv = w.qkv.forward(h1.view());
    let (q, qc) = nn::head_rms_norm(qkv.slice(s![.., ..d]), w.q_norm.view());
    let (k, kc) = nn::head_rms_norm(qkv.slice(s![.., d..2 * d]), w.k_norm.view());
    let v = qkv.slice(s![.., 2 * d..]).to_owned();
    (q, k, v, StreamPre { m, ln1, inv1, h1, qc, kc })
}

fn stream_post(w: &StreamWeights, x: ArrayView2<f64>, o: Array2<f64>, pre: &StreamPre) -> (Array2<f64>, StreamPost) {
    let d = x.ncols();
    let m = &pre.m;
    let a = w.proj.forward(o.view());
    let mut x1 = x.to_owned();
    x1 += &(&a * &chunk(m, 2, d));
    let (ln2, inv2) = nn::layer_norm(x1.view());
    let h2 = nn::modulate(ln2.view(), chunk(m, 3, d), chunk(m, 4, d));
    let f1 = w.fc1.forward(h2.view());
    let act = f1.mapv(nn::gelu);
    let f2 = w.fc2.forward(act.view());
    let mut out = x1;
    out += &(&f2 * &chunk(m, 5, d));
    (out, StreamPost { o, a, ln2, inv2, h2, f1, act, f2 })
}

/// Backward through the post-attention half. Returns `(dx, do)` and fills
/// the modulation gradient slots `gate1, shift2, scale2, gate2` of `dm`.
fn stream_post_backward(
    w: &StreamWeights,
    pre: &StreamPre,
    post: &StreamPost,
    dout: ArrayView2<f64>,
    dm: &mut Array1<f64>,
    g: &mut StreamWeights,
) -> (Array2<f64>, Array2<f64>) {
    let d = dout.ncols();
    let m = &pre.m;
    let mut dx1 = dout.to_owned();
    dm.slice_mut(s![5 * d..6 * d]).assign(&(&dout * &post.f2).sum_axis(Axis(0)));
    let df2 = &dout * &chunk(m, 5, d);
    let dact = w.fc2.backward(post.act.view(), df2.view(), &mut g.fc2);
    let df1 = dact * post.f1.mapv(nn::gelu_grad);
    let dh2 = w.fc1.backward(post.h2.view(), df1.view(), &mut g.fc1);
    let (dln2, dsh2, dsc2) = nn::modulate_backward(post.ln2.view(), chunk(m, 4, d), dh2.view());
    dm.slice_mut(s![3 * d..4 * d]).assign(&dsh2);
    dm.slice_mut(s![4 * d..5 * d]).assign(&dsc2);
    dx1 += &nn::layer_norm_backward(post.ln2.view(), post.inv2.view(), dln2.view());

    dm.slice_mut(s![2 * d..3 * d]).assign(&(&dx1 * &post.a).sum_axis(Axis(0)));
    let da = &dx1 * &chunk(m, 2, d);
    let d_o = w.proj.backward(post.o.view(), da.view(), &mut g.proj);
    (dx1, d_o)
}

/// Backward through the pre-attention half, given gradients of the
/// normalized (pre-rotary) q, k and of v. Adds into `dx`.
#[allow(clippy::too_many_arguments)]
fn stream_pre_backward(
    w: &StreamWeights,
    pre: &StreamPre,
    dq: ArrayView2<f64>,
    dk: ArrayView2<f64>,
    dv: ArrayView2<f64>,
    dx: &mut Array2<f64>,
    dm: &mut Array1<f64>,
    g: &mut StreamWeights,
) {
    let d = dx.ncols();
    let dq_raw = nn::head_rms_norm_backward(&pre.qc, w.q_norm.view(), dq, &mut g.q_norm);
    let dk_raw = nn::head_rms_norm_backward(&pre.kc, w.k_norm.view(), dk, &mut g.k_norm);
    let dqkv = concatenate![Axis(1), dq_raw, dk_raw, dv];
    let dh1 = w.qkv.backward(pre.h1.view(), dqkv.view(), &mut g.qkv);
    let (dln1, dsh1, dsc1) = nn::modulate_backward(pre.ln1.view(), chunk(&pre.m, 1, d), dh1.view());
    dm.slice_mut(s![..d]).assign(&dsh1);
    dm.slice_mut(s![d..2 * d]).assign(&dsc1);
    *dx += &nn::layer_norm_backward(pre.ln1.view(), pre.inv1.view(), dln1.view());
}

fn double_forward(
    block: &DoubleBlock,
    x_txt: ArrayView2<f64>,
    x_img: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, DoubleCache) {
    let n_txt = x_txt.nrows();
    let (qt, kt, vt, txt_pre) = stream_pre(&block.txt, x_txt, cond);
    let (qi, ki, vi, img_pre) = stream_pre(&block.img, x_img, cond);
    let mut q = concatenate![Axis(0), qt, qi];
    let mut k = concatenate![Axis(0), kt, ki];
    let v = concatenate![Axis(0), vt, vi];
    rope.apply(&mut q.view_mut(), false);
    rope.apply(&mut k.view_mut(), false);
    let (o, att) = nn::attention(q.view(), k.view(), v.view(), heads);
    let (t_out, txt_post) = stream_post(&block.txt, x_txt, o.slice(s![..n_txt, ..]).to_owned(), &txt_pre);
    let (i_out, img_post) = stream_post(&block.img, x_img, o.slice(s![n_txt.., ..]).to_owned(), &img_pre);
    (t_out, i_out, DoubleCache { txt_pre, img_pre, txt_post, img_post, q, k, v, att })
}

#[allow(clippy::too_many_arguments)]
fn double_backward(
    block: &DoubleBlock,
    c: &DoubleCache,
    dout_txt: ArrayView2<f64>,
    dout_img: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    g: &mut DoubleBlock,
    dcond: &mut Array1<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n_txt = dout_txt.nrows();
    let d = dout_txt.ncols();
    let mut dm_txt = Array1::zeros(6 * d);
    let mut dm_img = Array1::zeros(6 * d);
    let (mut dx_txt, do_txt) = stream_post_backward(&block.txt, &c.txt_pre, &c.txt_post, dout_txt, &mut dm_txt, &mut g.txt);
    let (mut dx_img, do_img) = stream_post_backward(&block.img, &c.img_pre, &c.img_post, dout_img, &mut dm_img, &mut g.img);
    let d_o = concatenate![Axis(0), do_txt, do_img];
    let (mut dq, mut dk, dv) = nn::attention_backward(c.q.view(), c.k.view(), c.v.view(), &c.att, d_o.view());
    rope.apply(&mut dq.view_mut(), true);
    rope.apply(&mut dk.view_mut(), true);
    let tx = s![..n_txt, ..];
    let im = s![n_txt.., ..];
    stream_pre_backward(
        &block.txt,
        &c.txt_pre,
        dq.slice(tx),
        dk.slice(tx),
        dv.slice(tx),
        &mut dx_txt,
        &mut dm_txt,
        &mut g.txt,
    );
    stream_pre_backward(
        &block.img,
        &c.img_pre,
        dq.slice(im),
        dk.slice(im),
        dv.slice(im),
        &mut dx_img,
        &mut dm_img,
        &mut g.img,
    );
    *dcond += &block.txt.modulation.backward_vec(cond, dm_txt.view(), &mut g.txt.modulation);
    *dcond += &block.img.modulation.backward_vec(cond, dm_img.view(), &mut g.img.modulation);
    (dx_txt, dx_img)
}

fn single_forward(
    block: &SingleBlock,
    x: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    heads: usize,
) -> (Array2<f64>, SingleCache) {
    let d = x.ncols();
    let m = block.modulation.forward_vec(cond);
    let (ln, inv) = nn::layer_norm(x);
    let h = nn::modulate(ln.view(), chunk(&m, 0, d), chunk(&m, 1, d));
    let fused = block.fused_in.forward(h.view());
    let (mut q, qc) = nn::head_rms_norm(fused.slice(s![.., ..d]), block.q_norm.view());
    let (mut k, kc) = nn::head_rms_norm(fused.slice(s![.., d..2 * d]), block.k_norm.view());
    let v = fused.slice(s![.., 2 * d..3 * d]).to_owned();
    let mlp_in = fused.slice(s![.., 3 * d..]).to_owned();
    rope.apply(&mut q.view_mut(), false);
    rope.apply(&mut k.view_mut(), false);
    let (o, att) = nn::attention(q.view(), k.view(), v.view(), heads);
    let cat = concatenate![Axis(1), o, mlp_in.mapv(nn::gelu)];
    let y = block.fused_out.forward(cat.view());
    let mut out = x.to_owned();
    out += &(&y * &chunk(&m, 2, d));
    let cache = SingleCache { m, ln, inv, h, qc, kc, q, k, v, att, cat, mlp_in, y };
    (out, cache)
}

#[allow(clippy::too_many_arguments)]
fn single_backward(
    block: &SingleBlock,
    c: &SingleCache,
    dout: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    g: &mut SingleBlock,
    dcond: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dout.ncols();
    let mut dm = Array1::zeros(3 * d);
    dm.slice_mut(s![2 * d..]).assign(&(&dout * &c.y).sum_axis(Axis(0)));
    let dy = &dout * &chunk(&c.m, 2, d);
    let dcat = block.fused_out.backward(c.cat.view(), dy.view(), &mut g.fused_out);
    let d_o = dcat.slice(s![.., ..d]);
    let dmlp = &dcat.slice(s![.., d..]) * &c.mlp_in.mapv(nn::gelu_grad);
    let (mut dq, mut dk, dv) = nn::attention_backward(c.q.view(), c.k.view(), c.v.view(), &c.att, d_o);
    rope.apply(&mut dq.view_mut(), true);
    rope.apply(&mut dk.view_mut(), true);
    let dq_raw = nn::head_rms_norm_backward(&c.qc, block.q_norm.view(), dq.view(), &mut g.q_norm);
    let dk_raw = nn::head_rms_norm_backward(&c.kc, block.k_norm.view(), dk.view(), &mut g.k_norm);
    let dfused = concatenate![Axis(1), dq_raw, dk_raw, dv, dmlp];
    let dh = block.fused_in.backward(c.h.view(), dfused.view(), &mut g.fused_in);
    let (dln, dsh, dsc) = nn::modulate_backward(c.ln.view(), chunk(&c.m, 1, d), dh.view());
    dm.slice_mut(s![..d]).assign(&dsh);
    dm.slice_mut(s![d..2 * d]).assign(&dsc);
    *dcond += &block.modulation.backward_vec(cond, dm.view(), &mut g.modulation);
    let mut dx = dout.to_owned();
    dx += &nn::layer_norm_backward(c.ln.view(), c.inv.view(), dln.view());
    dx
}

/// Runs a lone double-stream block; exposed for block-level checks.
pub fn double_block(
    block: &DoubleBlock,
    image_stream: ArrayView2<f64>,
    text_stream: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
    let (t, i, cache) = double_forward(block, text_stream, image_stream, cond, rope, heads);
    (i, t, cache.att.probs)
}

/// Runs a lone fused single-stream block.
pub fn single_block_fused(
    block: &SingleBlock,
    tokens: ArrayView2<f64>,
    cond: ArrayView1<f64>,
    rope: &RopeTables,
    heads: usize,
) -> Array2<f64> {
    single_forward(block, tokens, cond, rope, heads).0
}

impl DoubleBlock {
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        Self { img: StreamWeights::new(cfg, Init::Random(std), rng), txt: StreamWeights::new(cfg, Init::Random(std), rng) }
    }

    pub fn zero_gated<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self { img: StreamWeights::new(cfg, Init::ZeroGated, rng), txt: StreamWeights::new(cfg, Init::ZeroGated, rng) }
    }
}

impl SingleBlock {
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        Self::new(cfg, Init::Random(std), rng)
    }

    pub fn zero_gated<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::new(cfg, Init::ZeroGated, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::positions::assign_positions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(6, 32, 2, 1, 2, 10)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_init_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::new(48, 32, 2, 1, 1, 10);
        let params = ModelParams::new(cfg, Init::ZeroGated, &mut rng).unwrap();
        let pos = assign_positions((4, 4), &[(4, 4)]);
        let tokens = rand_mat(32, 48, &mut rng);
        let input = ModelInput { image_tokens: tokens.view(), target_len: 16, positions: &pos, text_tokens: &[1, 2], t: 0.3 };
        let out = params.forward(&input).unwrap();
        assert_eq!(out.dim(), (16, 48));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::new(tiny_config(), Init::Random(0.3), &mut rng).unwrap();
        let pos = assign_positions((2, 2), &[(2, 3)]);
        let tokens = rand_mat(10, 6, &mut rng);
        let input = ModelInput { image_tokens: tokens.view(), target_len: 4, positions: &pos, text_tokens: &[3], t: 0.6 };
        let base = params.forward(&input).unwrap();

        let perm = [0, 1, 2, 3, 9, 5, 8, 4, 7, 6];
        let tokens_p = tokens.select(Axis(0), &perm);
        let pos_p: Vec<_> = perm.iter().map(|&i| pos[i]).collect();
        let input_p = ModelInput { image_tokens: tokens_p.view(), positions: &pos_p, ..input };
        let permuted = params.forward(&input_p).unwrap();
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::new(tiny_config(), Init::Random(0.3), &mut rng).unwrap();
        let pos = assign_positions((2, 2), &[]);
        let tokens = rand_mat(4, 6, &mut rng);
        let input = ModelInput { image_tokens: tokens.view(), target_len: 4, positions: &pos, text_tokens: &[], t: 0.1 };
        assert_eq!(params.forward(&input).unwrap(), params.forward(&input).unwrap());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::new(tiny_config(), Init::Random(0.3), &mut rng).unwrap();
        let pos = assign_positions((2, 2), &[]);
        let tokens = rand_mat(5, 6, &mut rng);
        let input = ModelInput { image_tokens: tokens.view(), target_len: 4, positions: &pos, text_tokens: &[], t: 0.1 };
        assert!(params.forward(&input).is_err());
        let tokens = rand_mat(4, 6, &mut rng);
        let input = ModelInput { image_tokens: tokens.view(), target_len: 4, positions: &pos, text_tokens: &[99], t: 0.1 };
        assert!(params.forward(&input).is_err());
    }

    #[test]
    fn gated_blocks_start_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let cond = Array1::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
        let img = rand_mat(4, 32, &mut rng);
        let txt = rand_mat(2, 32, &mut rng);
        let mut pos = vec![PositionTriplet::ORIGIN; 2];
        pos.extend(assign_positions((2, 2), &[]));
        let rope = cfg.rope.tables(&pos);

        let db = DoubleBlock::zero_gated(&cfg, &mut rng);
        let (i, t, probs) = double_block(&db, img.view(), txt.view(), cond.view(), &rope, 2);
        assert_eq!(i, img);
        assert_eq!(t, txt);
        for p in probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        let sb = SingleBlock::zero_gated(&cfg, &mut rng);
        let all = concatenate![Axis(0), txt, img];
        assert_eq!(single_block_fused(&sb, all.view(), cond.view(), &rope, 2), all);
    }

    #[test]
    fn text_changes_reach_image_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_config();
        let cond = Array1::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
        let img = rand_mat(4, 32, &mut rng);
        let txt_a = rand_mat(2, 32, &mut rng);
        let txt_b = rand_mat(2, 32, &mut rng);
        let mut pos = vec![PositionTriplet::ORIGIN; 2];
        pos.extend(assign_positions((2, 2), &[]));
        let rope = cfg.rope.tables(&pos);
        let db = DoubleBlock::random(&cfg, 0.3, &mut rng);
        let (ia, _, _) = double_block(&db, img.view(), txt_a.view(), cond.view(), &rope, 2);
        let (ib, _, _) = double_block(&db, img.view(), txt_b.view(), cond.view(), &rope, 2);
        assert!((&ia - &ib).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn fused_matches_unfused_and_halves_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_config();
        let mut unfused = UnfusedParallelBlock::random(&cfg, 0.3, &mut rng);
        assert!(SingleBlock::from_unfused(&unfused).is_err());
        unfused.tie_modulation();
        let fused = SingleBlock::from_unfused(&unfused).unwrap();
        let x = rand_mat(7, 32, &mut rng);
        let cond = Array1::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
        let mut pos = vec![PositionTriplet::ORIGIN];
        pos.extend(assign_positions((2, 3), &[]));
        let rope = cfg.rope.tables(&pos);
        let a = unfused.forward(x.view(), cond.view(), &rope, 2);
        let b = single_block_fused(&fused, x.view(), cond.view(), &rope, 2);
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-10));
        assert_eq!(2 * fused.modulation_params(), unfused.modulation_params());
        assert_eq!(fused.modulation.output_dim(), 3 * 32);
    }
}
