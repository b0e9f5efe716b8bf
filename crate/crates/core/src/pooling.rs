//! Spatial aggregation of a single `h × w × d` feature map into a
//! `d`-vector: GAP, GMP, LSE, GWRP and hybrid pooling (mean of split-grid
//! local maxima blended with GAP).

use ndarray::{Array1, Array3, ArrayView1, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GWRP_DECAY: f64 = 0.996;
pub const DEFAULT_LSE_SHARPNESS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub split_sizes: Vec<usize>,
    pub gamma: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            split_sizes: vec![1, 2, 4],
            gamma: 2.0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !self.split_sizes.contains(&1) {
            return Err(Error::Config(format!(
                "split sizes {:?} must include 1",
                self.split_sizes
            )));
        }
        for &r in &self.split_sizes {
            check_split(r, h, w).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Aggregator used by the image-label head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pooling {
    Gap,
    Gmp,
    Lse { sharpness: f64 },
    Gwrp { decay: f64 },
    Hybrid(PoolConfig),
}

impl Pooling {
    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Gap => "gap",
            Pooling::Gmp => "gmp",
            Pooling::Lse { .. } => "lse",
            Pooling::Gwrp { .. } => "gwrp",
            Pooling::Hybrid(_) => "hp",
        }
    }

    pub fn forward(&self, f: ArrayView3<f64>) -> Result<Array1<f64>> {
        match self {
            Pooling::Gap => Ok(gap(f)),
            Pooling::Gmp => branch_pool(f, 1),
            Pooling::Lse { sharpness } => lse(f, *sharpness),
            Pooling::Gwrp { decay } => gwrp(f, *decay),
            Pooling::Hybrid(cfg) => hybrid_pool(f, cfg),
        }
    }

    /// Gradient with respect to `f` given the gradient of the pooled vector.
    pub fn backward(&self, f: ArrayView3<f64>, d_out: ArrayView1<f64>) -> Result<Array3<f64>> {
        match self {
            Pooling::Gap => Ok(gap_backward(f.dim(), d_out)),
            Pooling::Gmp => branch_pool_backward(f, 1, d_out),
            Pooling::Lse { sharpness } => lse_backward(f, *sharpness, d_out),
            Pooling::Gwrp { decay } => gwrp_backward(f, *decay, d_out),
            Pooling::Hybrid(cfg) => hybrid_pool_backward(f, cfg, d_out),
        }
    }
}

fn check_split(r: usize, h: usize, w: usize) -> Result<()> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "split size r={r} does not divide feature map {h}x{w}"
        )));
    }
    Ok(())
}

pub fn gap(f: ArrayView3<f64>) -> Array1<f64> {
    let (h, w, d) = f.dim();
    let mut out = Array1::zeros(d);
    for y in 0..h {
        for x in 0..w {
            out += &f.slice(ndarray::s![y, x, ..]);
        }
    }
    out / (h * w) as f64
}

fn gap_backward((h, w, d): (usize, usize, usize), d_out: ArrayView1<f64>) -> Array3<f64> {
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((h, w, d), |(_, _, c)| d_out[c] * scale)
}

/// Channel-wise max over each cell of an `r × r` grid.
pub fn local_max_pool(f: ArrayView3<f64>, r: usize) -> Result<Array3<f64>> {
    Ok(local_max_with_argmax(f, r)?.0)
}

/// Max values and the winning `(y, x)` per `(cell_y, cell_x, channel)`;
/// ties go to the lowest raster index.
fn local_max_with_argmax(
    f: ArrayView3<f64>,
    r: usize,
) -> Result<(Array3<f64>, Array3<(usize, usize)>)> {
    let (h, w, d) = f.dim();
    check_split(r, h, w)?;
    let (bh, bw) = (h / r, w / r);
    let mut vals = Array3::from_elem((r, r, d), f64::NEG_INFINITY);
    let mut idx = Array3::from_elem((r, r, d), (0usize, 0usize));
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (y / bh, x / bw);
            for c in 0..d {
                let v = f[[y, x, c]];
                if v > vals[[cy, cx, c]] {
                    vals[[cy, cx, c]] = v;
                    idx[[cy, cx, c]] = (y, x);
                }
            }
        }
    }
    Ok((vals, idx))
}

/// Mean over the `r × r` grid of local maxima.
pub fn branch_pool(f: ArrayView3<f64>, r: usize) -> Result<Array1<f64>> {
    let m = local_max_pool(f, r)?;
    let d = f.dim().2;
    let mut out = Array1::zeros(d);
    for cy in 0..r {
        for cx in 0..r {
            out += &m.slice(ndarray::s![cy, cx, ..]);
        }
    }
    Ok(out / (r * r) as f64)
}

fn branch_pool_backward(f: ArrayView3<f64>, r: usize, d_out: ArrayView1<f64>) -> Result<Array3<f64>> {
    let (_, idx) = local_max_with_argmax(f, r)?;
    let mut g = Array3::zeros(f.raw_dim());
    accumulate_branch(&mut g, &idx, r, d_out, 1.0);
    Ok(g)
}

fn accumulate_branch(
    g: &mut Array3<f64>,
    idx: &Array3<(usize, usize)>,
    r: usize,
    d_out: ArrayView1<f64>,
    weight: f64,
) {
    let scale = weight / (r * r) as f64;
    for ((_, _, c), &(y, x)) in idx.indexed_iter() {
        g[[y, x, c]] += d_out[c] * scale;
    }
}

/// `(Σ_r f_max_r + γ·f_gap) / (γ + |R|)`.
pub fn hybrid_pool(f: ArrayView3<f64>, cfg: &PoolConfig) -> Result<Array1<f64>> {
    let (h, w, _) = f.dim();
    cfg.validate(h, w)?;
    let mut acc = gap(f) * cfg.gamma;
    for &r in &cfg.split_sizes {
        acc += &branch_pool(f, r)?;
    }
    Ok(acc / (cfg.gamma + cfg.split_sizes.len() as f64))
}

fn hybrid_pool_backward(
    f: ArrayView3<f64>,
    cfg: &PoolConfig,
    d_out: ArrayView1<f64>,
) -> Result<Array3<f64>> {
    let (h, w, _) = f.dim();
    cfg.validate(h, w)?;
    let denom = cfg.gamma + cfg.split_sizes.len() as f64;
    let mut g = gap_backward(f.dim(), d_out) * (cfg.gamma / denom);
    for &r in &cfg.split_sizes {
        let (_, idx) = local_max_with_argmax(f, r)?;
        accumulate_branch(&mut g, &idx, r, d_out, 1.0 / denom);
    }
    Ok(g)
}

fn check_decay(decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Parameter(format!("gwrp decay must be in (0, 1), got {decay}")));
    }
    Ok(())
}

/// Per-channel pixel order by descending value, ties by raster index.
fn ranked(f: &ArrayView3<f64>, c: usize) -> Vec<(usize, usize)> {
    let (h, w, _) = f.dim();
    let mut order: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    order.sort_by(|a, b| f[[b.0, b.1, c]].total_cmp(&f[[a.0, a.1, c]]));
    order
}

fn gwrp_weights(n: usize, decay: f64) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(n);
    let mut wt = 1.0;
    for _ in 0..n {
        weights.push(wt);
        wt *= decay;
    }
    let z = weights.iter().sum();
    (weights, z)
}

/// Global weighted rank pooling.
pub fn gwrp(f: ArrayView3<f64>, decay: f64) -> Result<Array1<f64>> {
    check_decay(decay)?;
    let (h, w, d) = f.dim();
    let (weights, z) = gwrp_weights(h * w, decay);
    Ok((0..d)
        .map(|c| {
            ranked(&f, c)
                .iter()
                .zip(&weights)
                .map(|(&(y, x), wt)| wt * f[[y, x, c]])
                .sum::<f64>()
                / z
        })
        .collect())
}

fn gwrp_backward(f: ArrayView3<f64>, decay: f64, d_out: ArrayView1<f64>) -> Result<Array3<f64>> {
    check_decay(decay)?;
    let (h, w, d) = f.dim();
    let (weights, z) = gwrp_weights(h * w, decay);
    let mut g = Array3::zeros(f.raw_dim());
    for c in 0..d {
        for (&(y, x), wt) in ranked(&f, c).iter().zip(&weights) {
            g[[y, x, c]] = d_out[c] * wt / z;
        }
    }
    Ok(g)
}

fn check_sharpness(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Parameter(format!("lse sharpness must be positive, got {s}")));
    }
    Ok(())
}

/// Log-sum-exp pooling `(1/s)·log(mean(exp(s·x)))`.
pub fn lse(f: ArrayView3<f64>, sharpness: f64) -> Result<Array1<f64>> {
    check_sharpness(sharpness)?;
    let (h, w, d) = f.dim();
    let n = (h * w) as f64;
    Ok((0..d)
        .map(|c| {
            let ch = f.slice(ndarray::s![.., .., c]);
            let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = ch.iter().map(|&v| (sharpness * (v - max)).exp()).sum::<f64>() / n;
            max + mean.ln() / sharpness
        })
        .collect())
}

fn lse_backward(f: ArrayView3<f64>, sharpness: f64, d_out: ArrayView1<f64>) -> Result<Array3<f64>> {
    check_sharpness(sharpness)?;
    let (_, _, d) = f.dim();
    let mut g = Array3::zeros(f.raw_dim());
    for c in 0..d {
        let ch = f.slice(ndarray::s![.., .., c]);
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ch.iter().map(|&v| (sharpness * (v - max)).exp()).sum();
        for ((y, x), &v) in ch.indexed_iter() {
            g[[y, x, c]] = d_out[c] * (sharpness * (v - max)).exp() / z;
        }
    }
    Ok(g)
}
