//! mIoU scoring, background-threshold search, codebook diagnostics and the
//! ablation grid runner.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cam::{self, ClassActivationMaps};
use crate::codebook;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::persist::hash_of;
use crate::training::{self, PoolKind, Strategy, TrainConfig, TrainOptions, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Background first, then each class.
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    /// Rows are ground truth, columns prediction.
    pub confusion: Vec<Vec<u64>>,
}

/// Confusion matrix over `{0..=L}`.
pub fn confusion(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize, acc: &mut [Vec<u64>]) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in resolution",
            pred.dim(),
            gt.dim()
        )));
    }
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p as usize, g as usize);
        if p > num_classes || g > num_classes {
            return Err(Error::Validation(format!(
                "mask value out of range for {num_classes} classes: pred {p}, gt {g}"
            )));
        }
        acc[g][p] += 1;
    }
    Ok(())
}

pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> IoUReport {
    let n = confusion.len();
    let per_class_iou: Vec<f64> = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..n).map(|r| confusion[r][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                1.0
            } else {
                tp as f64 / denom as f64
            }
        })
        .collect();
    let miou = per_class_iou.iter().sum::<f64>() / n as f64;
    IoUReport {
        per_class_iou,
        miou,
        confusion,
    }
}

/// Accumulates over the whole split before dividing.
pub fn miou(pred: &[Array2<u8>], gt: &[Array2<u8>], num_classes: usize) -> Result<IoUReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let mut acc = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for (p, g) in pred.iter().zip(gt) {
        confusion(p, g, num_classes, &mut acc)?;
    }
    Ok(report_from_confusion(acc))
}

/// Per-pixel best present class and its normalized score at image
/// resolution. The pseudo label at threshold θ is `class` if `score ≥ θ`.
pub struct CamDecision {
    best: Array2<u8>,
    score: Array2<f64>,
}

impl CamDecision {
    pub fn new(cams: &ClassActivationMaps, present: &[usize], height: usize, width: usize) -> Result<Self> {
        let full = cam::upsample_cams(cams, height, width);
        // threshold 0 labels every pixel with its best present class
        let mask = cam::pseudo_labels(&full, present, 0.0)?;
        let score = Array2::from_shape_fn((height, width), |(y, x)| {
            let c = mask.labels[[y, x]] as usize - 1;
            full.normalized[[c, y, x]]
        });
        Ok(Self {
            best: mask.labels,
            score,
        })
    }

    pub fn mask(&self, theta: f64) -> Array2<u8> {
        ndarray::Zip::from(&self.best)
            .and(&self.score)
            .map_collect(|&b, &s| if s >= theta { b } else { 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSearch {
    pub best_theta: f64,
    pub best: IoUReport,
    /// `(θ, mIoU)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Grid search over θ; ties go to the smallest θ.
pub fn search_theta(decisions: &[CamDecision], gt: &[Array2<u8>], num_classes: usize, grid: &[f64]) -> Result<ThetaSearch> {
    let mut thetas = grid.to_vec();
    thetas.sort_by(f64::total_cmp);
    let mut best: Option<(f64, IoUReport)> = None;
    let mut curve = Vec::with_capacity(thetas.len());
    for &theta in &thetas {
        let mut acc = vec![vec![0u64; num_classes + 1]; num_classes + 1];
        for (d, g) in decisions.iter().zip(gt) {
            confusion(&d.mask(theta), g, num_classes, &mut acc)?;
        }
        let report = report_from_confusion(acc);
        curve.push((theta, report.miou));
        if best.as_ref().is_none_or(|(_, b)| report.miou > b.miou) {
            best = Some((theta, report));
        }
    }
    let (best_theta, best) = best.ok_or_else(|| Error::Config("empty theta grid".into()))?;
    Ok(ThetaSearch {
        best_theta,
        best,
        curve,
    })
}

/// CAM decisions for every sample of a split (present classes from labels).
pub fn cam_decisions(model: &TrainedModel, dataset: &Dataset) -> Result<Vec<CamDecision>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let cams = model.cams(&refs)?;
        for (s, c) in chunk.iter().zip(&cams) {
            out.push(CamDecision::new(c, &s.present_classes(), s.height(), s.width())?);
        }
    }
    Ok(out)
}

pub fn evaluate_cams(model: &TrainedModel, dataset: &Dataset, grid: &[f64]) -> Result<ThetaSearch> {
    let decisions = cam_decisions(model, dataset)?;
    let gt: Vec<Array2<u8>> = dataset.samples.iter().map(|s| s.gt_mask.clone()).collect();
    search_theta(&decisions, &gt, dataset.num_classes(), grid)
}

/// Largest absolute cosine similarity between two distinct codebook rows.
pub fn max_offdiag_cosine(words: &Array2<f64>) -> f64 {
    let norms: Vec<f64> = words.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut best: f64 = 0.0;
    for i in 0..words.nrows() {
        for j in (i + 1)..words.nrows() {
            let c = words.row(i).dot(&words.row(j)) / (norms[i] * norms[j]);
            best = best.max(c.abs());
        }
    }
    best
}

/// Soft word frequencies (inference mode) for every sample, `n × k`.
pub fn word_frequencies(model: &TrainedModel, dataset: &Dataset) -> Result<Array2<f64>> {
    let cb = model
        .codebook()
        .ok_or_else(|| Error::Contract("model has no codebook".into()))?;
    let k = cb.k();
    let mut out = Array2::zeros((dataset.len(), k));
    let mut row = 0;
    for chunk in dataset.samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let feats = model.features(&refs)?;
        for f in feats.outer_iter() {
            let (h, w, d) = f.dim();
            let flat = f.as_standard_layout().into_owned().into_shape_with_order((h * w, d)).expect("contiguous");
            let wa = codebook::encode(flat.view(), cb, model.config().tau)?;
            out.row_mut(row).assign(&wa.f_word);
            row += 1;
        }
    }
    Ok(out)
}

/// Logistic-regression probe with per-feature standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearProbe {
    /// Full-batch gradient descent from zero; deterministic.
    pub fn fit(x: &Array2<f64>, y: &[Vec<u8>], iterations: usize, lr: f64) -> Self {
        let (n, k) = x.dim();
        let l = y.first().map_or(0, |v| v.len());
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(k));
        let std = x.std_axis(ndarray::Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 0.0 });
        let z = (x - &mean) * &scale;
        let targets = Array2::from_shape_fn((n, l), |(i, c)| y[i][c] as f64);
        let mut weight = Array2::<f64>::zeros((k, l));
        let mut bias = Array1::<f64>::zeros(l);
        for _ in 0..iterations {
            let logits = z.dot(&weight) + &bias;
            let err = logits.mapv(|v| 1.0 / (1.0 + (-v).exp())) - &targets;
            let gw = z.t().dot(&err) / n as f64;
            let gb = err.sum_axis(ndarray::Axis(0)) / n as f64;
            weight.scaled_add(-lr, &gw);
            bias.scaled_add(-lr, &gb);
        }
        Self {
            mean,
            scale,
            weight,
            bias,
        }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<u8> {
        let z = (x - &self.mean) * &self.scale;
        (z.dot(&self.weight) + &self.bias).mapv(|v| u8::from(v > 0.0))
    }
}

/// Mean over classes of the per-class fraction of correct predictions.
pub fn per_class_accuracy(pred: &Array2<u8>, y: &[Vec<u8>]) -> f64 {
    let (n, l) = pred.dim();
    if n == 0 || l == 0 {
        return 0.0;
    }
    let correct: usize = (0..l)
        .map(|c| (0..n).filter(|&i| pred[[i, c]] == y[i][c]).count())
        .sum();
    correct as f64 / (n * l) as f64
}

/// Image-label accuracy from soft word frequencies on `eval`. Learning
/// models use their own word-to-image head (σ > 0.5 ⇔ logit > 0); models
/// without one get a linear probe fitted on `train`.
pub fn word_frequency_accuracy(model: &TrainedModel, train: &Dataset, eval: &Dataset) -> Result<f64> {
    let labels: Vec<Vec<u8>> = eval.samples.iter().map(|s| s.y_img.clone()).collect();
    let f_eval = word_frequencies(model, eval)?;
    let pred = match &model.state.heads.w_w2i {
        Some(w2i) => f_eval.dot(w2i).mapv(|v| u8::from(v > 0.0)),
        None => {
            let f_train = word_frequencies(model, train)?;
            let y_train: Vec<Vec<u8>> = train.samples.iter().map(|s| s.y_img.clone()).collect();
            LinearProbe::fit(&f_train, &y_train, 500, 0.5).predict(&f_eval)
        }
    };
    Ok(per_class_accuracy(&pred, &labels))
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// The four rows of the main ablation: GAP baseline, +HP, +HP+VWL-L, +HP+VWL-M.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    let mk = |name: &str, strategy, pooling| Variant {
        name: name.to_string(),
        config: TrainConfig {
            strategy,
            pooling,
            ..base.clone()
        },
    };
    vec![
        mk("baseline_gap", Strategy::None, PoolKind::Gap),
        mk("baseline_hp", Strategy::None, PoolKind::Hp),
        mk("hp_vwl_l", Strategy::Learning, PoolKind::Hp),
        mk("hp_vwl_m", Strategy::MemoryBank, PoolKind::Hp),
    ]
}

/// Baseline classifiers with each aggregator.
pub fn pooling_variants(base: &TrainConfig) -> Vec<Variant> {
    [PoolKind::Gap, PoolKind::Gmp, PoolKind::Lse, PoolKind::Gwrp, PoolKind::Hp]
        .into_iter()
        .map(|pooling| Variant {
            name: format!("pool_{}", serde_json::to_value(pooling).unwrap().as_str().unwrap()),
            config: TrainConfig {
                strategy: Strategy::None,
                pooling,
                ..base.clone()
            },
        })
        .collect()
}

/// One variant per value of a config key.
pub fn sweep_variants(base: &TrainConfig, key: &str, values: &[String]) -> Result<Vec<Variant>> {
    values
        .iter()
        .map(|v| {
            Ok(Variant {
                name: format!("{key}={v}"),
                config: with_override(base, key, v)?,
            })
        })
        .collect()
}

/// Sets one config key from its textual value (TOML syntax; bare words are
/// treated as strings).
pub fn with_override(base: &TrainConfig, key: &str, value: &str) -> Result<TrainConfig> {
    let mut table: toml::Table = toml::from_str(&base.to_toml_string()).map_err(|e| Error::Serde(e.to_string()))?;
    if !table.contains_key(key) && key != "data_dir" {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    table.insert(key.to_string(), parsed);
    let text = toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))?;
    TrainConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub miou: f64,
    pub best_theta: f64,
    pub wall_time_s: f64,
    pub max_offdiag_cos: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

/// Trains and scores each (variant, seed) on shared data. A failing
/// variant yields a row with `status = "failed: ..."` and the grid goes on.
pub fn run_ablation(grid: &AblationGrid, train: &Dataset, eval: &Dataset, mut on_row: impl FnMut(&AblationRow)) -> Vec<AblationRow> {
    let data_hash = hash_of(&(train.config.hash(), train.seed, train.len(), eval.len()));
    let mut rows = Vec::new();
    for variant in &grid.variants {
        for &seed in &grid.seeds {
            let cfg = TrainConfig {
                seed,
                ..variant.config.clone()
            };
            let start = Instant::now();
            let result = training::train(&cfg, train, &TrainOptions::default()).and_then(|(model, _)| {
                let search = evaluate_cams(&model, eval, &cfg.theta_grid)?;
                Ok((search, model.codebook().map(|c| max_offdiag_cosine(&c.words))))
            });
            let wall = start.elapsed().as_secs_f64();
            let row = match result {
                Ok((search, cos)) => AblationRow {
                    variant: variant.name.clone(),
                    seed,
                    config_hash: cfg.hash(),
                    data_hash: data_hash.clone(),
                    miou: search.best.miou,
                    best_theta: search.best_theta,
                    wall_time_s: wall,
                    max_offdiag_cos: cos,
                    status: "ok".into(),
                },
                Err(e) => AblationRow {
                    variant: variant.name.clone(),
                    seed,
                    config_hash: cfg.hash(),
                    data_hash: data_hash.clone(),
                    miou: f64::NAN,
                    best_theta: f64::NAN,
                    wall_time_s: wall,
                    max_offdiag_cos: None,
                    status: format!("failed: {e}"),
                },
            };
            on_row(&row);
            rows.push(row);
        }
    }
    rows
}

/// Median over seeds of each variant's mIoU (failed rows excluded).
pub fn median_by_variant(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant) {
            names.push(r.variant.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == name && r.status == "ok")
                .map(|r| r.miou)
                .collect();
            v.sort_by(f64::total_cmp);
            let m = if v.is_empty() {
                f64::NAN
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            };
            (name, m)
        })
        .collect()
}

/// Deterministic metric table (no timings), comma separated.
pub fn write_metric_table(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_record(["variant", "seed", "config_hash", "data_hash", "miou", "best_theta", "max_offdiag_cos", "status"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.data_hash.clone(),
            format!("{:.6}", r.miou),
            format!("{:.2}", r.best_theta),
            r.max_offdiag_cos.map_or(String::new(), |c| format!("{c:.6}")),
            r.status.clone(),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    rows: &'a [AblationRow],
    median_miou: Vec<(String, f64)>,
    variants: &'a [Variant],
}

/// Structured summary including timings and full variant configs.
pub fn write_summary(rows: &[AblationRow], variants: &[Variant], path: &Path) -> Result<()> {
    let s = Summary {
        rows,
        median_miou: median_by_variant(rows),
        variants,
    };
    let text = serde_json::to_string_pretty(&s).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Human-readable table of medians.
pub fn format_summary(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant                 median mIoU\n");
    for (name, m) in median_by_variant(rows) {
        out.push_str(&format!("{name:<24}{:>8.2}\n", m * 100.0));
    }
    out
}
