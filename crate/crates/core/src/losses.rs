//! Multi-label soft margin loss, the DeCov codebook regularizer, bias-free
//! prediction heads, and the two composite objectives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-free 1×1 projections. Logits are `p = fᵀ W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads {
    /// `d × L`.
    pub w_img: Array2<f64>,
    /// `d × k`.
    pub w_word: Array2<f64>,
    /// `k × L`, only for the learning strategy.
    pub w_w2i: Option<Array2<f64>>,
}

impl PredictionHeads {
    pub fn init(d: usize, k: usize, num_classes: usize, with_w2i: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let w_img = draw(d, num_classes);
        let w_word = draw(d, k);
        let w_w2i = with_w2i.then(|| draw(k, num_classes));
        Self {
            w_img,
            w_word,
            w_w2i,
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.w_img.as_slice_mut().unwrap(),
            self.w_word.as_slice_mut().unwrap(),
        ];
        if let Some(w) = self.w_w2i.as_mut() {
            out.push(w.as_slice_mut().unwrap());
        }
        out
    }
}

/// Logits of a bias-free head.
pub fn project(features: ArrayView1<f64>, weight: &Array2<f64>) -> Array1<f64> {
    features.dot(weight)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls_img: f64,
    pub cls_word: f64,
    pub cls_w2i: f64,
    pub decov: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("cls_img", self.cls_img),
            ("cls_word", self.cls_word),
            ("cls_w2i", self.cls_w2i),
            ("decov", self.decov),
            ("total", self.total),
        ]
    }
}

/// `softplus(x) = log(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_labels(logits: ArrayView1<f64>, y: &[u8]) -> Result<()> {
    if logits.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} labels",
            logits.len(),
            y.len()
        )));
    }
    if let Some(v) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("labels must be binary, found {v}")));
    }
    Ok(())
}

/// Negated mean binary log-likelihood of independent logistic outputs.
pub fn soft_margin_loss(logits: ArrayView1<f64>, y: &[u8]) -> Result<f64> {
    check_labels(logits, y)?;
    let n = y.len() as f64;
    Ok(logits
        .iter()
        .zip(y)
        .map(|(&p, &t)| if t == 1 { softplus(-p) } else { softplus(p) })
        .sum::<f64>()
        / n)
}

/// `∂loss/∂p_i = (σ(p_i) − y_i) / L`.
pub fn soft_margin_grad(logits: ArrayView1<f64>, y: &[u8]) -> Result<Array1<f64>> {
    check_labels(logits, y)?;
    let n = y.len() as f64;
    Ok(logits
        .iter()
        .zip(y)
        .map(|(&p, &t)| (sigmoid(p) - t as f64) / n)
        .collect())
}

fn centered(c: ArrayView2<f64>) -> Array2<f64> {
    let mean = c.mean_axis(Axis(1)).expect("d > 0");
    let mut a = c.to_owned();
    for (mut row, m) in a.rows_mut().into_iter().zip(mean.iter()) {
        row -= *m;
    }
    a
}

/// Row covariance `(1/d)·(C − μ)(C − μ)ᵀ`, `k × k`.
pub fn row_covariance(c: ArrayView2<f64>) -> Array2<f64> {
    let a = centered(c);
    a.dot(&a.t()) / c.ncols() as f64
}

/// `½·(‖Ĉ‖_F² − ‖diag Ĉ‖²)`.
pub fn decov_loss(c: ArrayView2<f64>) -> f64 {
    let cov = row_covariance(c);
    let mut off = 0.0;
    for ((i, j), &v) in cov.indexed_iter() {
        if i != j {
            off += v * v;
        }
    }
    0.5 * off
}

pub fn decov_grad(c: ArrayView2<f64>) -> Array2<f64> {
    let d = c.ncols() as f64;
    let a = centered(c);
    let mut g = a.dot(&a.t()) / d;
    for i in 0..g.nrows() {
        g[[i, i]] = 0.0;
    }
    let da = g.dot(&a) * (2.0 / d);
    // project out the per-row mean (centering is linear)
    let mean = da.mean_axis(Axis(1)).expect("d > 0");
    let mut out = da;
    for (mut row, m) in out.rows_mut().into_iter().zip(mean.iter()) {
        row -= *m;
    }
    out
}

/// Image-label loss plus word-label loss.
pub fn loss_memory(
    p_img: ArrayView1<f64>,
    y_img: &[u8],
    p_word: ArrayView1<f64>,
    y_word: &[u8],
) -> Result<LossBundle> {
    let cls_img = soft_margin_loss(p_img, y_img)?;
    let cls_word = soft_margin_loss(p_word, y_word)?;
    Ok(LossBundle {
        cls_img,
        cls_word,
        cls_w2i: 0.0,
        decov: 0.0,
        total: cls_img + cls_word,
    })
}

/// Adds the word-frequency-to-image loss and the DeCov term to
/// [`loss_memory`]. Both auxiliary inputs are required.
pub fn loss_learning(
    p_img: ArrayView1<f64>,
    y_img: &[u8],
    p_word: ArrayView1<f64>,
    y_word: &[u8],
    p_w2i: Option<ArrayView1<f64>>,
    codebook: Option<ArrayView2<f64>>,
) -> Result<LossBundle> {
    let (p_w2i, codebook) = match (p_w2i, codebook) {
        (Some(p), Some(c)) => (p, c),
        _ => {
            return Err(Error::Contract(
                "learning objective needs both word-to-image logits and the codebook".into(),
            ))
        }
    };
    let base = loss_memory(p_img, y_img, p_word, y_word)?;
    let cls_w2i = soft_margin_loss(p_w2i, y_img)?;
    let decov = decov_loss(codebook);
    Ok(LossBundle {
        cls_w2i,
        decov,
        total: base.total + cls_w2i + decov,
        ..base
    })
}
