//! Dense layers and their hand-written backward passes.
//!
//! Activations are `tokens x features` matrices in `f64`. Every forward that
//! needs intermediate values for its backward pass returns them explicitly;
//! gradients accumulate into a parameter struct of the same type.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub const NORM_EPS: f64 = 1e-6;

/// Flat read access to every tensor of a parameter tree, in a fixed order.
pub trait Visit {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

impl<D: Dimension> Visit for ndarray::Array<f64, D> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: prefix.to_string(),
            shape: self.shape(),
            data: self.as_slice().expect("parameters are kept in standard layout"),
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("parameters are kept in standard layout"));
    }
}

impl<T: Visit> Visit for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&format!("{prefix}.{i}"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for item in self {
            item.visit_mut(out);
        }
    }
}

/// Implements [`Visit`] for a struct by listing its fields.
macro_rules! impl_visit {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Visit for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<$crate::nn::TensorRef<'a>>) {
                $(
                    let name = if prefix.is_empty() {
                        stringify!($field).to_string()
                    } else {
                        format!("{}.{}", prefix, stringify!($field))
                    };
                    self.$field.visit(&name, out);
                )*
            }

            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
                $( self.$field.visit_mut(out); )*
            }
        }
    };
}
pub(crate) use impl_visit;

pub fn tensors<V: Visit>(v: &V) -> Vec<TensorRef<'_>> {
    let mut out = Vec::new();
    v.visit("", &mut out);
    out
}

pub fn tensors_mut<V: Visit>(v: &mut V) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    v.visit_mut(&mut out);
    out
}

pub fn param_count<V: Visit>(v: &V) -> usize {
    tensors(v).iter().map(|t| t.data.len()).sum()
}

/// `a += b` over two parameter trees of identical structure.
pub fn add_assign<V: Visit>(a: &mut V, b: &V) {
    for (x, y) in tensors_mut(a).into_iter().zip(tensors(b)) {
        for (p, q) in x.iter_mut().zip(y.data) {
            *p += q;
        }
    }
}

pub fn scale<V: Visit>(a: &mut V, factor: f64) {
    for x in tensors_mut(a) {
        x.iter_mut().for_each(|p| *p *= factor);
    }
}

pub fn fill<V: Visit>(a: &mut V, value: f64) {
    for x in tensors_mut(a) {
        x.iter_mut().for_each(|p| *p = value);
    }
}

pub fn l2_norm<V: Visit>(a: &V) -> f64 {
    tensors(a)
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl_visit!(Linear { w, b });

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((input, output)), b: Array1::zeros(output) }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self {
            w: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    /// Every entry, bias included, drawn from `N(0, std^2)`.
    pub fn normal<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            w: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            b: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        let x2 = x.insert_axis(Axis(1));
        let dy2 = dy.insert_axis(Axis(0));
        ndarray::linalg::general_mat_mul(1.0, &x2, &dy2, 1.0, &mut grad.w);
        grad.b += &dy;
        self.w.dot(&dy)
    }
}

/// Parameter-free layer norm over the feature axis. Returns the normalized
/// activations and the per-row inverse standard deviation.
pub fn layer_norm(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let s = *inv_std;
        row.mapv_inplace(|v| v * s);
    }
    (y, inv)
}

pub fn layer_norm_backward(y: ArrayView2<f64>, inv_std: ArrayView1<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(y.rows())
        .and(dy.rows())
        .and(inv_std)
        .for_each(|mut dx, y, dy, &inv| {
            let mean_dy = dy.sum() / d;
            let mean_dyy = dy.dot(&y) / d;
            Zip::from(&mut dx).and(&y).and(&dy).for_each(|o, &yv, &g| {
                *o = inv * (g - mean_dy - yv * mean_dyy);
            });
        });
    dx
}

/// RMS normalization applied independently to each `head_dim` chunk of every
/// row, followed by a learned per-dimension gain shared across heads.
pub struct HeadRmsCache {
    pub normed: Array2<f64>,
    pub inv_rms: Array2<f64>,
}

pub fn head_rms_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>) -> (Array2<f64>, HeadRmsCache) {
    let hd = gain.len();
    let heads = x.ncols() / hd;
    let mut normed = x.to_owned();
    let mut inv_rms = Array2::zeros((x.nrows(), heads));
    for (n, mut row) in normed.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("contiguous");
        for (h, chunk) in row.chunks_exact_mut(hd).enumerate() {
            let ms = chunk.iter().map(|v| v * v).sum::<f64>() / hd as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v *= inv);
            inv_rms[[n, h]] = inv;
        }
    }
    let mut out = normed.clone();
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("contiguous");
        for chunk in row.chunks_exact_mut(hd) {
            chunk.iter_mut().zip(gain.iter()).for_each(|(v, g)| *v *= g);
        }
    }
    (out, HeadRmsCache { normed, inv_rms })
}

pub fn head_rms_norm_backward(
    cache: &HeadRmsCache,
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let hd = gain.len();
    let mut dx = Array2::zeros(dy.raw_dim());
    for n in 0..dy.nrows() {
        let dy_row = dy.row(n);
        let n_row = cache.normed.row(n);
        let mut dx_row = dx.row_mut(n);
        for h in 0..cache.inv_rms.ncols() {
            let sl = s![h * hd..(h + 1) * hd];
            let g = dy_row.slice(sl);
            let nv = n_row.slice(sl);
            let mut dn = Array1::zeros(hd);
            for j in 0..hd {
                dgain[j] += g[j] * nv[j];
                dn[j] = g[j] * gain[j];
            }
            let mean_dn_n = dn.dot(&nv) / hd as f64;
            let inv = cache.inv_rms[[n, h]];
            let mut out = dx_row.slice_mut(sl);
            for j in 0..hd {
                out[j] = inv * (dn[j] - nv[j] * mean_dn_n);
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn silu(x: f64) -> f64 {
    x * crate::schedule::sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = crate::schedule::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Softmax attention probabilities per head, kept for the backward pass.
pub struct AttentionCache {
    pub probs: Vec<Array2<f64>>,
}

/// Multi-head scaled dot-product attention; `q`, `k`, `v` are
/// `tokens x (heads * head_dim)`.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let hd = q.ncols() / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let sl = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(sl).dot(&k.slice(sl).t());
        scores.mapv_inplace(|v| v * scale);
        softmax_rows(&mut scores);
        out.slice_mut(sl).assign(&scores.dot(&v.slice(sl)));
        probs.push(scores);
    }
    (out, AttentionCache { probs })
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cache: &AttentionCache,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.probs.len();
    let hd = q.ncols() / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let sl = s![.., h * hd..(h + 1) * hd];
        let dout_h = dout.slice(sl);
        dv.slice_mut(sl).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&v.slice(sl).t());
        let mut ds = dp;
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = ds_row.dot(&p_row);
            Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
        }
        dq.slice_mut(sl).assign(&ds.dot(&k.slice(sl)));
        dk.slice_mut(sl).assign(&ds.t().dot(&q.slice(sl)));
    }
    (dq, dk, dv)
}

/// `y = x * (1 + scale) + shift`, row-broadcast.
pub fn modulate(x: ArrayView2<f64>, shift: ArrayView1<f64>, scale: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        Zip::from(&mut row).and(&shift).and(&scale).for_each(|v, &sh, &sc| *v = *v * (1.0 + sc) + sh);
    }
    y
}

/// Backward of [`modulate`]: returns `(dx, dshift, dscale)`.
pub fn modulate_backward(
    x: ArrayView2<f64>,
    scale: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (&dy * &x).sum_axis(Axis(0));
    let mut dx = dy.to_owned();
    for mut row in dx.rows_mut() {
        Zip::from(&mut row).and(&scale).for_each(|v, &sc| *v *= 1.0 + sc);
    }
    (dx, dshift, dscale)
}

/// Sinusoidal embedding of a scalar timestep (scaled by 1000), `dim` even.
pub fn timestep_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}
