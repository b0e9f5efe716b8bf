//! Small convolutional feature extractor with hand-written backward pass.
//!
//! Each stage is `conv3x3 (pad 1) -> batch norm -> relu`. Tensors are NHWC so
//! that im2col rows and GEMM outputs share the natural row-major layout.
//! Features are tapped after the final stage's relu.

use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{hash_of, sha256_hex};

pub const FEATURE_TAP: &str = "final_stage_post_relu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 48, 64],
            strides: vec![2, 2, 1, 1],
            image_height: 64,
            image_width: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Output channels `d`.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Spatial size `(h, w)` of the feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.total_stride();
        (self.image_height / s, self.image_width / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "need one stride per stage: {} widths vs {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!(
                "stage strides must be 1 or 2, got {:?}",
                self.strides
            )));
        }
        let s = self.total_stride();
        if self.image_height % s != 0 || self.image_width % s != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by total stride {s}",
                self.image_height, self.image_width
            )));
        }
        let (h, w) = self.feature_size();
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} must have both sides divisible by 4"
            )));
        }
        if self.feature_dim() < 8 {
            return Err(Error::Config(format!(
                "feature dimension {} must be at least 8",
                self.feature_dim()
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps <= 0.0 {
            return Err(Error::Config("invalid batch-norm momentum or epsilon".into()));
        }
        Ok(())
    }

    /// Trainable parameter count: `9·c_in·c_out + 2·c_out` per stage.
    pub fn parameter_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut total = 0;
        for &c_out in &self.widths {
            total += 9 * c_in * c_out + 2 * c_out;
            c_in = c_out;
        }
        total
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// `(9·c_in) × c_out`, rows ordered (ky, kx, c_in).
    pub weight: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    pub weight: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub stages: Vec<StageGrads>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Per-batch statistics.
    Train,
    /// Running averages.
    Eval,
}

struct StageCache {
    input_dim: (usize, usize, usize, usize),
    cols: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    /// Post-relu output, used as the relu mask.
    out: Array2<f64>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache {
    stages: Vec<StageCache>,
    mode: NormMode,
}

pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.in_channels;
    let mut stages = Vec::with_capacity(config.widths.len());
    for (&c_out, &stride) in config.widths.iter().zip(&config.strides) {
        let fan_in = 9 * c_in;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((fan_in, c_out), |_| normal.sample(&mut rng));
        stages.push(Stage {
            weight,
            gamma: Array1::ones(c_out),
            beta: Array1::zeros(c_out),
            running_mean: Array1::zeros(c_out),
            running_var: Array1::ones(c_out),
            stride,
        });
        c_in = c_out;
    }
    Ok(BackboneParams {
        config: config.clone(),
        stages,
    })
}

impl BackboneParams {
    pub fn parameter_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.weight.len() + s.gamma.len() + s.beta.len())
            .sum()
    }

    /// Digest over trainable parameters and running statistics.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for s in &self.stages {
            for a in [
                s.weight.as_slice().unwrap(),
                s.gamma.as_slice().unwrap(),
                s.beta.as_slice().unwrap(),
                s.running_mean.as_slice().unwrap(),
                s.running_var.as_slice().unwrap(),
            ] {
                for v in a {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        sha256_hex(&bytes)
    }

    /// Trainable tensors in a fixed order, paired with [`BackboneGrads::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.stages.len() * 3);
        for s in &mut self.stages {
            out.push(s.weight.as_slice_mut().unwrap());
            out.push(s.gamma.as_slice_mut().unwrap());
            out.push(s.beta.as_slice_mut().unwrap());
        }
        out
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let momentum = self.config.bn_momentum;
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages) {
            let (n, h, w, _) = sc.input_dim;
            let (oh, ow) = (h / stage.stride, w / stage.stride);
            let m = (n * oh * ow) as f64;
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            stage.running_mean = &stage.running_mean * (1.0 - momentum) + &sc.batch_mean * momentum;
            stage.running_var =
                &stage.running_var * (1.0 - momentum) + &sc.batch_var * (momentum * unbiased);
        }
    }
}

impl BackboneGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.stages.len() * 3);
        for s in &self.stages {
            out.push(s.weight.as_slice().unwrap());
            out.push(s.gamma.as_slice().unwrap());
            out.push(s.beta.as_slice().unwrap());
        }
        out
    }
}

fn check_input(config: &BackboneConfig, images: &ArrayView4<f64>) -> Result<()> {
    let (_, h, w, c) = images.dim();
    if h != config.image_height || w != config.image_width || c != config.in_channels {
        return Err(Error::Shape(format!(
            "expected image batch (n, {}, {}, {}), got {:?}",
            config.image_height,
            config.image_width,
            config.in_channels,
            images.shape()
        )));
    }
    Ok(())
}

/// Inference-mode feature extraction: `(n, H, W, 3) -> (n, h, w, d)`.
pub fn extract_features(params: &BackboneParams, images: &Array4<f64>) -> Result<Array4<f64>> {
    Ok(forward(params, images.view(), NormMode::Eval)?.0)
}

/// Forward pass retaining activations for the backward pass.
pub fn forward(
    params: &BackboneParams,
    images: ArrayView4<f64>,
    mode: NormMode,
) -> Result<(Array4<f64>, ForwardCache)> {
    check_input(&params.config, &images)?;
    let eps = params.config.bn_eps;
    let mut x = images.as_standard_layout().to_owned();
    let mut caches = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        let input_dim = x.dim();
        let (n, h, w, _) = input_dim;
        let (oh, ow) = (h / stage.stride, w / stage.stride);
        let c_out = stage.weight.ncols();
        let cols = im2col(&x, stage.stride);
        let z = cols.dot(&stage.weight);
        let m = z.nrows() as f64;

        let (mean, var) = match mode {
            NormMode::Train => {
                let mean = z.sum_axis(Axis(0)) / m;
                let mut var = Array1::<f64>::zeros(c_out);
                for row in z.rows() {
                    for ((v, &zi), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                        *v += (zi - mu) * (zi - mu);
                    }
                }
                (mean, var / m)
            }
            NormMode::Eval => (stage.running_mean.clone(), stage.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = z;
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v * stage.gamma[j] + stage.beta[j]).max(0.0);
            }
        }
        x = out
            .clone()
            .into_shape_with_order((n, oh, ow, c_out))
            .expect("contiguous gemm output");
        caches.push(StageCache {
            input_dim,
            cols,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            out,
        });
    }
    Ok((
        x,
        ForwardCache {
            stages: caches,
            mode,
        },
    ))
}

/// Back-propagates `d_features` (same shape as the forward output).
/// Returns parameter gradients and, when `want_input_grad`, the gradient
/// with respect to the input images.
pub fn backward(
    params: &BackboneParams,
    cache: &ForwardCache,
    d_features: &Array4<f64>,
    want_input_grad: bool,
) -> (BackboneGrads, Option<Array4<f64>>) {
    let mut grads: Vec<StageGrads> = Vec::with_capacity(params.stages.len());
    let mut dy = d_features
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((d_features.len() / params.config.feature_dim(), params.config.feature_dim()))
        .expect("feature gradient is contiguous");
    let mut d_input = None;
    for (idx, (stage, sc)) in params.stages.iter().zip(&cache.stages).enumerate().rev() {
        let c_out = stage.weight.ncols();
        let m = sc.xhat.nrows() as f64;
        // relu then affine
        let mut dxhat = dy;
        let mut dgamma = Array1::<f64>::zeros(c_out);
        let mut dbeta = Array1::<f64>::zeros(c_out);
        for ((mut drow, xrow), orow) in dxhat.rows_mut().into_iter().zip(sc.xhat.rows()).zip(sc.out.rows()) {
            for j in 0..c_out {
                let g = if orow[j] > 0.0 { drow[j] } else { 0.0 };
                dgamma[j] += g * xrow[j];
                dbeta[j] += g;
                drow[j] = g * stage.gamma[j];
            }
        }
        // normalization
        let dz = match cache.mode {
            NormMode::Train => {
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let mut sum_dxhat_xhat = Array1::<f64>::zeros(c_out);
                for (drow, xrow) in dxhat.rows().into_iter().zip(sc.xhat.rows()) {
                    for j in 0..c_out {
                        sum_dxhat_xhat[j] += drow[j] * xrow[j];
                    }
                }
                let mut dz = dxhat;
                for (mut drow, xrow) in dz.rows_mut().into_iter().zip(sc.xhat.rows()) {
                    for j in 0..c_out {
                        drow[j] = sc.inv_std[j] / m
                            * (m * drow[j] - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                    }
                }
                dz
            }
            NormMode::Eval => {
                let mut dz = dxhat;
                for mut drow in dz.rows_mut() {
                    for j in 0..c_out {
                        drow[j] *= sc.inv_std[j];
                    }
                }
                dz
            }
        };
        let dweight = sc.cols.t().dot(&dz);
        grads.push(StageGrads {
            weight: dweight,
            gamma: dgamma,
            beta: dbeta,
        });
        if idx > 0 || want_input_grad {
            let dcols = dz.dot(&stage.weight.t());
            let dx = col2im(&dcols, sc.input_dim, stage.stride);
            if idx == 0 {
                d_input = Some(dx);
                dy = Array2::zeros((0, 0));
            } else {
                let (n, h, w, c) = sc.input_dim;
                dy = dx.into_shape_with_order((n * h * w, c)).expect("contiguous");
            }
        } else {
            dy = Array2::zeros((0, 0));
        }
    }
    grads.reverse();
    (BackboneGrads { stages: grads }, d_input)
}

/// 3×3, pad 1 patches: rows `(n, oy, ox)`, columns `(ky, kx, c)`.
fn im2col(x: &Array4<f64>, stride: usize) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h / stride, w / stride);
    let mut cols = Array2::<f64>::zeros((n * oh * ow, 9 * c));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().unwrap();
    let row_len = 9 * c;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_len;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s0 = ((b * h + iy as usize) * w + ix as usize) * c;
                        let d0 = row + (ky * 3 + kx) * c;
                        dst[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (n, h, w, c): (usize, usize, usize, usize),
    stride: usize,
) -> Array4<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let mut x = Array4::<f64>::zeros((n, h, w, c));
    let dst = x.as_slice_mut().unwrap();
    let src = cols.as_slice().expect("standard layout");
    let row_len = 9 * c;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_len;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d0 = ((b * h + iy as usize) * w + ix as usize) * c;
                        let s0 = row + (ky * 3 + kx) * c;
                        for (d, s) in dst[d0..d0 + c].iter_mut().zip(&src[s0..s0 + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stacks images from `(H, W, 3)` tensors into one batch.
pub fn stack_images(images: &[ndarray::Array3<f64>]) -> Array4<f64> {
    let (h, w, c) = images[0].dim();
    let mut batch = Array4::<f64>::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        batch.slice_mut(s![i, .., .., ..]).assign(img);
    }
    batch
}
