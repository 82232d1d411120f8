//! Images, latent token grids, and the concatenated target+context sequence.
//!
//! The latent codec is an exactly invertible non-overlapping patchify, so
//! every reconstruction error downstream comes from the flow model.

use std::io::{BufRead, BufReader, BufWriter, Seek, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positions::{assign_positions, PositionTriplet};

/// Interleaved (`height x width x channels`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch { left: vec![data.len()], right: vec![height, width, channels] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// 8-bit PNG (gray, RGB or RGBA by channel count). Values are clamped
    /// and rounded to the nearest of 256 levels.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.encode_png(BufWriter::new(file)).map_err(|e| relabel(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(BufReader::new(file)).map_err(|e| relabel(path, e))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_png(&mut out)?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode_png(std::io::Cursor::new(bytes))
    }

    fn encode_png<W: Write>(&self, w: W) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Domain(format!("cannot write {c}-channel image as PNG"))),
        };
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    fn decode_png<R: BufRead + Seek>(r: R) -> Result<Self> {
        let mut decoder = png::Decoder::new(r);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let channels = info.color_type.samples();
        buf.truncate(info.buffer_size());
        let data = buf.iter().map(|&b| dequantize(b)).collect();
        ImageTensor::new(channels, info.height as usize, info.width as usize, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::format("png", e.to_string())
}

fn relabel(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
        other => other,
    }
}

/// Latent tokens of one image in row-major order (`grid_h * grid_w x channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Array2<f64>,
}

impl TokenGrid {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() != grid_h * grid_w {
            return Err(Error::ShapeMismatch { left: vec![tokens.nrows()], right: vec![grid_h, grid_w] });
        }
        Ok(Self { grid_h, grid_w, tokens })
    }

    pub fn latent_channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}

/// Patchify: token `(gy, gx)` holds the `patch x patch x channels` block in
/// `(row, column, channel)` order.
pub fn encode(image: &ImageTensor, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::Domain(format!(
            "image {}x{} not divisible by patch {patch}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let c = image.channels;
    let mut tokens = Array2::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = tokens.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for &v in image.pixel(gy * patch + py, gx * patch + px) {
                        row[k] = v as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    TokenGrid::new(gh, gw, tokens)
}

/// Exact inverse of [`encode`].
pub fn decode(grid: &TokenGrid, patch: usize) -> Result<ImageTensor> {
    let per_patch = patch * patch;
    if patch == 0 || grid.latent_channels() % per_patch != 0 {
        return Err(Error::Domain(format!(
            "{} latent channels is not a multiple of patch area {per_patch}",
            grid.latent_channels()
        )));
    }
    let c = grid.latent_channels() / per_patch;
    let mut img = ImageTensor::filled(c, grid.grid_h * patch, grid.grid_w * patch, 0.0);
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let row = grid.tokens.row(gy * grid.grid_w + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for v in img.pixel_mut(gy * patch + py, gx * patch + px) {
                        *v = row[k] as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// `[target | context_1 | ... | context_N]` with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<PositionTriplet>,
    pub target_len: usize,
    pub target_dims: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

pub fn build_sequence(target: &TokenGrid, contexts: &[TokenGrid]) -> Result<TokenSequence> {
    if let Some(bad) = contexts.iter().find(|c| c.latent_channels() != target.latent_channels()) {
        return Err(Error::ShapeMismatch {
            left: vec![target.latent_channels()],
            right: vec![bad.latent_channels()],
        });
    }
    let dims: Vec<_> = contexts.iter().map(TokenGrid::dims).collect();
    let positions = assign_positions(target.dims(), &dims);
    let mut views: Vec<ArrayView2<f64>> = vec![target.tokens.view()];
    views.extend(contexts.iter().map(|c| c.tokens.view()));
    let tokens = concatenate(Axis(0), &views).expect("channel counts checked");
    Ok(TokenSequence { tokens, positions, target_len: target.len(), target_dims: target.dims() })
}

/// PSNR in dB (peak 1.0) and mean SSIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionMetrics {
    /// `f64::INFINITY` when the images are identical.
    pub psnr: f64,
    pub ssim: f64,
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn reconstruction_metrics(a: &ImageTensor, b: &ImageTensor) -> Result<ReconstructionMetrics> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok(ReconstructionMetrics { psnr, ssim: ssim(a, b) })
}

/// Gaussian-window SSIM over valid positions, averaged across channels.
/// Images smaller than the 11x11 window use the largest odd window that fits.
fn ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut win = SSIM_WINDOW.min(a.height).min(a.width);
    if win % 2 == 0 {
        win -= 1;
    }
    let half = (win / 2) as f64;
    let mut kernel: Vec<f64> = (0..win * win)
        .map(|i| {
            let (y, x) = ((i / win) as f64 - half, (i % win) as f64 - half);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (a.height - win + 1, a.width - win + 1);
    let mut sum = 0.0;
    for ch in 0..a.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..win {
                    for kx in 0..win {
                        let w = kernel[ky * win + kx];
                        let x = a.pixel(oy + ky, ox + kx)[ch] as f64;
                        let y = b.pixel(oy + ky, ox + kx)[ch] as f64;
                        mx += w * x;
                        my += w * y;
                        sxx += w * x * x;
                        syy += w * y * y;
                        sxy += w * (x * y);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                sum += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    sum / (a.channels * oh * ow) as f64
}

/// Per-channel latent statistics used to standardize tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-3;

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a TokenGrid>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for g in grids {
            if sum.is_empty() {
                sum = vec![0.0; g.latent_channels()];
                sq = vec![0.0; g.latent_channels()];
            }
            if g.latent_channels() != sum.len() {
                return Err(Error::ShapeMismatch { left: vec![sum.len()], right: vec![g.latent_channels()] });
            }
            for row in g.tokens.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += g.len();
        }
        if count == 0 {
            return Err(Error::Domain("cannot compute latent statistics of an empty set".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, grid: &TokenGrid) -> TokenGrid {
        let mut out = grid.clone();
        for mut row in out.tokens.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, grid: &TokenGrid) -> TokenGrid {
        let mut out = grid.clone();
        for mut row in out.tokens.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn encode_shape_and_roundtrip() {
        let img = random_image(3, 8, 8, 0);
        let grid = encode(&img, 4).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w, grid.latent_channels()), (2, 2, 48));
        assert_eq!(decode(&grid, 4).unwrap(), img);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let img = ImageTensor::filled(3, 8, 12, 0.25);
        let grid = encode(&img, 4).unwrap();
        for row in grid.tokens.rows() {
            assert_eq!(row, grid.tokens.row(0));
        }
    }

    #[test]
    fn codec_errors() {
        let img = random_image(3, 8, 6, 1);
        assert!(encode(&img, 4).is_err());
        let grid = TokenGrid::new(1, 1, Array2::zeros((1, 10))).unwrap();
        assert!(decode(&grid, 2).is_err());
    }

    #[test]
    fn sequence_layout() {
        let t = encode(&random_image(3, 8, 8, 2), 4).unwrap();
        let seq = build_sequence(&t, &[]).unwrap();
        assert_eq!(seq.tokens, t.tokens);
        assert!(seq.positions.iter().all(|p| p.t == 0));

        let ctx = encode(&random_image(3, 12, 12, 3), 4).unwrap();
        let seq = build_sequence(&t, &[ctx.clone()]).unwrap();
        assert_eq!((seq.len(), seq.target_len), (13, 4));
        assert_eq!(seq.tokens.slice(ndarray::s![4.., ..]), ctx.tokens);
        for (i, p) in seq.positions.iter().enumerate() {
            assert_eq!(p.t == 0, i < seq.target_len);
        }

        let wide = encode(&random_image(3, 4, 16, 4), 4).unwrap();
        let seq = build_sequence(&t, &[ctx, wide]).unwrap();
        assert_eq!(seq.positions.iter().map(|p| p.t).max(), Some(2));
        assert_eq!(seq.len(), 4 + 9 + 4);
    }

    #[test]
    fn metrics_closed_forms() {
        let a = random_image(3, 16, 16, 5);
        let m = reconstruction_metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert_eq!(m.ssim, 1.0);

        let zeros = ImageTensor::filled(3, 16, 16, 0.0);
        let ones = ImageTensor::filled(3, 16, 16, 1.0);
        assert_eq!(reconstruction_metrics(&zeros, &ones).unwrap().psnr, 0.0);

        let b = random_image(3, 16, 16, 6);
        let ab = reconstruction_metrics(&a, &b).unwrap().ssim;
        let ba = reconstruction_metrics(&b, &a).unwrap().ssim;
        assert_eq!(ab, ba);
        assert!(ab < 0.5);
        assert!(reconstruction_metrics(&a, &random_image(3, 8, 16, 7)).is_err());
    }

    #[test]
    fn stats_standardize() {
        let grids: Vec<_> = (0..4).map(|s| encode(&random_image(3, 8, 8, s), 4).unwrap()).collect();
        let stats = LatentStats::from_grids(&grids).unwrap();
        let normed: Vec<_> = grids.iter().map(|g| stats.normalize(g)).collect();
        let again = LatentStats::from_grids(&normed).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(again.std.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let back = stats.denormalize(&normed[0]);
        assert!((&back.tokens - &grids[0].tokens).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn png_roundtrip_of_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = ImageTensor::new(3, 4, 5, (0..60).map(|_| dequantize(rng.random())).collect()).unwrap();
        img.write_png(&path).unwrap();
        assert_eq!(ImageTensor::read_png(&path).unwrap(), img);
    }
}
