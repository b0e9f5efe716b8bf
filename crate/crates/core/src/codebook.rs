//! Visual-word codebook: cosine encoding, soft word frequencies, and the
//! two update strategies (gradient-trained words or an EMA memory bank of
//! per-batch assignment centroids).
//!
//! Pixel features are handled unfolded as an `hw × d` matrix with rows in
//! raster order.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{self, header_get, Header};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookMode {
    Learnable,
    MemoryBank,
}

impl CodebookMode {
    fn as_str(self) -> &'static str {
        match self {
            CodebookMode::Learnable => "learnable",
            CodebookMode::MemoryBank => "memory_bank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Random,
    RandomSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `k × d`.
    pub words: Array2<f64>,
    pub mode: CodebookMode,
    /// Number of EMA updates applied.
    pub update_count: u64,
}

impl Codebook {
    pub fn new(words: Array2<f64>, mode: CodebookMode) -> Result<Self> {
        let cb = Self {
            words,
            mode,
            update_count: 0,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.words.nrows()
    }

    pub fn d(&self) -> usize {
        self.words.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::Validation(format!("codebook needs k >= 2, got {}", self.k())));
        }
        if let Some(j) = self
            .words
            .rows()
            .into_iter()
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Validation(format!("codebook row {j} is all zeros")));
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.words.iter().flat_map(|v| v.to_le_bytes()).collect();
        persist::sha256_hex(&bytes)
    }
}

/// Everything derived from encoding one feature map against a codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAssignment {
    /// Cosine similarities, `hw × k`.
    pub s: Array2<f64>,
    /// Row-wise softmax of `τ·S`.
    pub p: Array2<f64>,
    /// Hard label per pixel.
    pub y: Vec<usize>,
    /// One-hot expansion of `y`.
    pub w: Array2<f64>,
    /// Word presence vector.
    pub y_word: Vec<u8>,
    /// Soft word frequency (column means of `P`).
    pub f_word: Array1<f64>,
}

pub fn init_codebook(
    k: usize,
    d: usize,
    seed: u64,
    method: InitMethod,
    mode: CodebookMode,
    feature_pool: Option<ArrayView2<f64>>,
) -> Result<Codebook> {
    if k < 2 || d < 2 {
        return Err(Error::Init(format!("codebook needs k, d >= 2, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = match method {
        InitMethod::Random => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut words: Array2<f64> = Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng));
            for mut row in words.rows_mut() {
                let norm = row.dot(&row).sqrt();
                row /= norm;
            }
            words
        }
        InitMethod::RandomSample => {
            let pool = feature_pool
                .ok_or_else(|| Error::Init("random_sample needs a feature pool".into()))?;
            if pool.ncols() != d {
                return Err(Error::Shape(format!(
                    "feature pool has dimension {}, codebook expects {d}",
                    pool.ncols()
                )));
            }
            let usable: Vec<usize> = pool
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
                .map(|(i, _)| i)
                .collect();
            if usable.len() < k {
                return Err(Error::Init(format!(
                    "random_sample needs {k} nonzero pixel features, pool has {}",
                    usable.len()
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, usable.len(), k);
            let mut words = Array2::zeros((k, d));
            for (row, pick) in words.rows_mut().into_iter().zip(picks.iter()) {
                let mut row = row;
                row.assign(&pool.row(usable[pick]));
            }
            words
        }
    };
    Codebook::new(words, mode).map_err(|e| Error::Init(e.to_string()))
}

fn row_norms(m: &ArrayView2<f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Cosine similarity between every pixel feature and every word. Pixels
/// with zero norm get similarity 0 to all words.
pub fn similarity(features: ArrayView2<f64>, codebook: &Codebook) -> Result<Array2<f64>> {
    if features.ncols() != codebook.d() {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match codebook dimension {}",
            features.ncols(),
            codebook.d()
        )));
    }
    let c_norm = row_norms(&codebook.words.view());
    if let Some(j) = c_norm.iter().position(|&n| n == 0.0) {
        return Err(Error::Validation(format!("codebook row {j} is all zeros")));
    }
    let f_norm = row_norms(&features);
    let mut s = features.dot(&codebook.words.t());
    for (mut row, &fn_) in s.rows_mut().into_iter().zip(f_norm.iter()) {
        if fn_ == 0.0 {
            row.fill(0.0);
            continue;
        }
        for (v, &cn) in row.iter_mut().zip(c_norm.iter()) {
            *v = (*v / (fn_ * cn)).clamp(-1.0, 1.0);
        }
    }
    Ok(s)
}

/// Gradients of a scalar through `S` into the features and the codebook.
///
/// `∂S_ij/∂F_i = (Ĉ_j − S_ij·F̂_i)/‖F_i‖` and symmetrically for `C_j`, where
/// hats denote unit vectors. Zero-norm pixels receive zero gradient.
pub fn similarity_backward(
    features: ArrayView2<f64>,
    words: ArrayView2<f64>,
    s: &Array2<f64>,
    d_s: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let f_norm = row_norms(&features);
    let c_norm = row_norms(&words);
    let safe_f = f_norm.mapv(|n| if n == 0.0 { 0.0 } else { 1.0 / n });
    let inv_c = c_norm.mapv(|n| 1.0 / n);

    // G_ij = dS_ij for live pixels, 0 for zero-norm pixels.
    let mut g = d_s.clone();
    for (mut row, &inv) in g.rows_mut().into_iter().zip(safe_f.iter()) {
        if inv == 0.0 {
            row.fill(0.0);
        }
    }
    // dF_i = (1/‖F_i‖) Σ_j G_ij (C_j/‖C_j‖) − (1/‖F_i‖²) (Σ_j G_ij S_ij) F_i
    let mut g_scaled_c = g.clone();
    for mut row in g_scaled_c.rows_mut() {
        for (v, &ic) in row.iter_mut().zip(inv_c.iter()) {
            *v *= ic;
        }
    }
    let mut d_f = g_scaled_c.dot(&words);
    let gs_row: Array1<f64> = (&g * s).sum_axis(Axis(1));
    for (i, mut row) in d_f.rows_mut().into_iter().enumerate() {
        let inv = safe_f[i];
        let corr = gs_row[i] * inv * inv;
        for (v, &fv) in row.iter_mut().zip(features.row(i).iter()) {
            *v = *v * inv - corr * fv;
        }
    }
    // dC_j = (1/‖C_j‖) Σ_i G_ij (F_i/‖F_i‖) − (1/‖C_j‖²) (Σ_i G_ij S_ij) C_j
    let mut g_scaled_f = g.clone();
    for (mut row, &inv) in g_scaled_f.rows_mut().into_iter().zip(safe_f.iter()) {
        row *= inv;
    }
    let mut d_c = g_scaled_f.t().dot(&features);
    let gs_col: Array1<f64> = (&g * s).sum_axis(Axis(0));
    for (j, mut row) in d_c.rows_mut().into_iter().enumerate() {
        let ic = inv_c[j];
        let corr = gs_col[j] * ic * ic;
        for (v, &cv) in row.iter_mut().zip(words.row(j).iter()) {
            *v = *v * ic - corr * cv;
        }
    }
    (d_f, d_c)
}

/// Row-wise softmax of `τ·S` with max subtraction.
pub fn assign_probabilities(s: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let mut p = s.mapv(|v| tau * v);
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(p)
}

/// `∂/∂S` given `∂/∂P`: `τ·P ⊙ (dP − ⟨dP, P⟩_row)`.
pub fn assign_probabilities_backward(p: &Array2<f64>, d_p: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut d_s = Array2::zeros(p.raw_dim());
    for ((mut ds, pr), dpr) in d_s.rows_mut().into_iter().zip(p.rows()).zip(d_p.rows()) {
        let inner = pr.dot(&dpr);
        for ((v, &pv), &dpv) in ds.iter_mut().zip(pr.iter()).zip(dpr.iter()) {
            *v = tau * pv * (dpv - inner);
        }
    }
    d_s
}

/// Hard word labels (ties to the lowest index), their one-hot matrix, and
/// the presence vector.
pub fn hard_labels(p: &Array2<f64>) -> (Vec<usize>, Vec<u8>, Array2<f64>) {
    let k = p.ncols();
    let y: Vec<usize> = p
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut w = Array2::zeros((p.nrows(), k));
    let mut y_word = vec![0u8; k];
    for (i, &j) in y.iter().enumerate() {
        w[[i, j]] = 1.0;
        y_word[j] = 1;
    }
    (y, y_word, w)
}

/// Column means of `P`.
pub fn soft_frequency(p: &Array2<f64>) -> Array1<f64> {
    p.mean_axis(Axis(0)).expect("P has at least one row")
}

pub fn soft_frequency_backward(d_f: &Array1<f64>, hw: usize) -> Array2<f64> {
    let row = d_f / hw as f64;
    let mut out = Array2::zeros((hw, d_f.len()));
    for mut r in out.rows_mut() {
        r.assign(&row);
    }
    out
}

/// Full encoding of one unfolded feature map.
pub fn encode(features: ArrayView2<f64>, codebook: &Codebook, tau: f64) -> Result<WordAssignment> {
    let s = similarity(features, codebook)?;
    let p = assign_probabilities(&s, tau)?;
    let (y, y_word, w) = hard_labels(&p);
    let f_word = soft_frequency(&p);
    Ok(WordAssignment {
        s,
        p,
        y,
        w,
        y_word,
        f_word,
    })
}

/// Mean feature per assigned word; words with no pixels keep their row.
pub fn reconstruct_codebook(
    labels: &[usize],
    features: ArrayView2<f64>,
    codebook: &Codebook,
) -> Result<Array2<f64>> {
    if codebook.mode != CodebookMode::MemoryBank {
        return Err(Error::Contract(
            "codebook reconstruction applies only to memory-bank codebooks".into(),
        ));
    }
    if labels.len() != features.nrows() || features.ncols() != codebook.d() {
        return Err(Error::Shape(format!(
            "labels ({}) and features ({}x{}) do not align with codebook dimension {}",
            labels.len(),
            features.nrows(),
            features.ncols(),
            codebook.d()
        )));
    }
    let k = codebook.k();
    let mut sums = Array2::<f64>::zeros((k, codebook.d()));
    let mut counts = vec![0usize; k];
    for (row, &j) in features.rows().into_iter().zip(labels) {
        if j >= k {
            return Err(Error::Shape(format!("label {j} out of range for k={k}")));
        }
        let mut acc = sums.row_mut(j);
        acc += &row;
        counts[j] += 1;
    }
    let mut out = codebook.words.clone();
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            out.row_mut(j).assign(&(&sums.row(j) / n as f64));
        }
    }
    Ok(out)
}

/// `C ← ρ·C' + (1 − ρ)·C`, incrementing the update counter.
pub fn ema_update(codebook: &Codebook, c_prime: &Array2<f64>, rho: f64) -> Result<Codebook> {
    if codebook.mode != CodebookMode::MemoryBank {
        return Err(Error::Contract("EMA updates apply only to memory-bank codebooks".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter(format!("momentum rho must be in (0, 1], got {rho}")));
    }
    if c_prime.dim() != codebook.words.dim() {
        return Err(Error::Shape(format!(
            "reconstructed codebook {:?} does not match {:?}",
            c_prime.dim(),
            codebook.words.dim()
        )));
    }
    let words = if rho == 1.0 {
        c_prime.clone()
    } else {
        c_prime * rho + &codebook.words * (1.0 - rho)
    };
    Ok(Codebook {
        words,
        mode: codebook.mode,
        update_count: codebook.update_count + 1,
    })
}

const CODEBOOK_MAGIC: &[u8; 4] = b"VWCB";
pub const CODEBOOK_VERSION: u32 = 1;

pub fn save_codebook(codebook: &Codebook, path: &Path) -> Result<()> {
    let header: Header = vec![
        ("mode".into(), codebook.mode.as_str().into()),
        ("k".into(), codebook.k().to_string()),
        ("d".into(), codebook.d().to_string()),
        ("update_count".into(), codebook.update_count.to_string()),
        ("words_checksum".into(), codebook.checksum()),
    ];
    let mut w = persist::Writer::default();
    encode_codebook(codebook, &mut w);
    persist::write_framed(path, CODEBOOK_MAGIC, CODEBOOK_VERSION, &header, &w.into_inner())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let (header, payload) = persist::read_framed(path, CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
    let mut r = persist::Reader::new(&payload, path);
    let cb = decode_codebook(&mut r)?;
    r.finish()?;
    if header_get(&header, "words_checksum") != Some(cb.checksum().as_str()) {
        return Err(Error::format(path, "words checksum does not match stored matrix"));
    }
    Ok(cb)
}

pub(crate) fn encode_codebook(codebook: &Codebook, w: &mut persist::Writer) {
    w.str(codebook.mode.as_str());
    w.u64(codebook.update_count);
    w.u64(codebook.k() as u64);
    w.u64(codebook.d() as u64);
    w.f64s(codebook.words.as_slice().expect("standard layout"));
}

pub(crate) fn decode_codebook(r: &mut persist::Reader) -> Result<Codebook> {
    let mode = match r.str()?.as_str() {
        "learnable" => CodebookMode::Learnable,
        "memory_bank" => CodebookMode::MemoryBank,
        other => return Err(Error::Validation(format!("unknown codebook mode {other:?}"))),
    };
    let update_count = r.u64()?;
    let k = r.u64()? as usize;
    let d = r.u64()? as usize;
    let data = r.f64s()?;
    let words = Array2::from_shape_vec((k, d), data)
        .map_err(|e| Error::Validation(format!("codebook payload: {e}")))?;
    Ok(Codebook {
        words,
        mode,
        update_count,
    })
}

/// Writes one tile strip per word: crops of the input image centred on
/// feature pixels assigned to that word. `labels[n]` holds the hard labels
/// of image `n` in raster order over the `fh × fw` feature grid.
pub fn export_word_tiles(
    images: &[Array3<u8>],
    labels: &[Vec<usize>],
    feature_size: (usize, usize),
    k: usize,
    crop: usize,
    per_word: usize,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (fh, fw) = feature_size;
    let mut picks: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); k];
    for (n, lab) in labels.iter().enumerate() {
        if lab.len() != fh * fw {
            return Err(Error::Shape(format!(
                "image {n} has {} labels, expected {}",
                lab.len(),
                fh * fw
            )));
        }
        for (i, &j) in lab.iter().enumerate() {
            // one crop per (image, word) keeps strips diverse
            if picks[j].len() < per_word && !picks[j].iter().any(|p| p.0 == n) {
                picks[j].push((n, i / fw, i % fw));
            }
        }
    }
    let mut written = Vec::new();
    for (j, list) in picks.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let mut strip = Array3::<u8>::zeros((crop, crop * list.len(), 3));
        for (t, &(n, fy, fx)) in list.iter().enumerate() {
            let img = &images[n];
            let (h, w, _) = img.dim();
            let (sy, sx) = (h / fh, w / fw);
            let cy = (fy * sy + sy / 2) as isize - crop as isize / 2;
            let cx = (fx * sx + sx / 2) as isize - crop as isize / 2;
            let oy = cy.clamp(0, (h - crop.min(h)) as isize) as usize;
            let ox = cx.clamp(0, (w - crop.min(w)) as isize) as usize;
            for y in 0..crop.min(h) {
                for x in 0..crop.min(w) {
                    for c in 0..3 {
                        strip[[y, t * crop + x, c]] = img[[oy + y, ox + x, c]];
                    }
                }
            }
        }
        let path = out_dir.join(format!("word_{j:03}.png"));
        crate::imageio::write_rgb(&path, &strip)?;
        written.push(path);
    }
    Ok(written)
}
