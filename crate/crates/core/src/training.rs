//! Training loop: backbone forward, per-step word labels from the live
//! codebook, pooled heads, strategy-dependent objective, SGD with heavy-ball
//! momentum under a polynomial learning-rate decay, and the memory-bank
//! codebook update.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneGrads, BackboneParams, NormMode};
use crate::cam::{self, ClassActivationMaps};
use crate::codebook::{self, Codebook, CodebookMode, InitMethod};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, PredictionHeads};
use crate::persist::{self, hash_of, header_get, Header};
use crate::pooling::{PoolConfig, Pooling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No visual-word branch (baseline classifier).
    None,
    Learning,
    MemoryBank,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Learning => "learning",
            Strategy::MemoryBank => "memory_bank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Gap,
    Gmp,
    Lse,
    Gwrp,
    Hp,
}

/// Every key is addressable from a flat `key = value` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub pooling: PoolKind,
    pub k: usize,
    pub gamma: f64,
    pub tau: f64,
    pub rho: f64,
    pub split_sizes: Vec<usize>,
    pub lse_sharpness: f64,
    pub gwrp_decay: f64,
    pub codebook_init: InitMethod,
    /// DeCov term in the learning objective.
    pub decov: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr_backbone: f64,
    pub base_lr_heads: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub seed: u64,
    pub hflip: bool,
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub data_dir: Option<String>,
    pub theta_grid: Vec<f64>,
}

pub fn default_theta_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self {
            strategy: Strategy::Learning,
            pooling: PoolKind::Hp,
            k: 32,
            gamma: 2.0,
            tau: 1.0,
            rho: 0.001,
            split_sizes: vec![1, 2, 4],
            lse_sharpness: crate::pooling::DEFAULT_LSE_SHARPNESS,
            gwrp_decay: crate::pooling::DEFAULT_GWRP_DECAY,
            codebook_init: InitMethod::Random,
            decov: true,
            epochs: 6,
            batch_size: 16,
            // the backbone trains from scratch here, so it gets the head rate
            base_lr_backbone: 0.1,
            base_lr_heads: 0.1,
            momentum: 0.9,
            lr_power: 0.9,
            seed: 0,
            hflip: false,
            backbone_widths: bb.widths,
            backbone_strides: bb.strides,
            data_dir: None,
            theta_grid: default_theta_grid(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters at the published operating point (k = 256).
    pub fn paper() -> Self {
        Self {
            k: 256,
            base_lr_backbone: 0.01,
            ..Self::default()
        }
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn pooling_op(&self) -> Pooling {
        match self.pooling {
            PoolKind::Gap => Pooling::Gap,
            PoolKind::Gmp => Pooling::Gmp,
            PoolKind::Lse => Pooling::Lse {
                sharpness: self.lse_sharpness,
            },
            PoolKind::Gwrp => Pooling::Gwrp {
                decay: self.gwrp_decay,
            },
            PoolKind::Hp => Pooling::Hybrid(PoolConfig {
                split_sizes: self.split_sizes.clone(),
                gamma: self.gamma,
            }),
        }
    }

    pub fn backbone_config(&self, image_height: usize, image_width: usize) -> BackboneConfig {
        BackboneConfig {
            widths: self.backbone_widths.clone(),
            strides: self.backbone_strides.clone(),
            image_height,
            image_width,
            ..BackboneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("base_lr_backbone", self.base_lr_backbone),
            ("base_lr_heads", self.base_lr_heads),
            ("lr_power", self.lr_power),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.strategy == Strategy::MemoryBank && !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.theta_grid.is_empty() || self.theta_grid.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("theta_grid must be a nonempty list of thresholds >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// `base · (1 − iter/max_iter)^power`.
pub fn lr_at(iter: usize, max_iter: usize, base: f64, power: f64) -> Result<f64> {
    if iter >= max_iter {
        return Err(Error::Schedule { iter, max_iter });
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Mutable training state. One owner; no interior sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub backbone: BackboneParams,
    pub heads: PredictionHeads,
    pub codebook: Option<Codebook>,
    /// Heavy-ball buffers, ordered backbone, heads, codebook.
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
    pub epochs_done: usize,
}

pub struct Batch {
    /// `(n, H, W, 3)` in [0, 1].
    pub images: Array4<f64>,
    pub y_img: Vec<Vec<u8>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        let imgs: Vec<Array3<f64>> = samples.iter().map(|s| s.image_f64()).collect();
        Self {
            images: backbone::stack_images(&imgs),
            y_img: samples.iter().map(|s| s.y_img.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y_img.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_img.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub backbone: BackboneGrads,
    pub w_img: Array2<f64>,
    pub w_word: Array2<f64>,
    pub w_w2i: Option<Array2<f64>>,
    /// Present whenever a codebook exists; identically zero in memory-bank
    /// mode because the codebook is outside the graph.
    pub codebook: Option<Array2<f64>>,
}

impl Gradients {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.slices();
        out.push(self.w_img.as_slice().unwrap());
        out.push(self.w_word.as_slice().unwrap());
        if let Some(w) = &self.w_w2i {
            out.push(w.as_slice().unwrap());
        }
        out
    }
}

/// Everything a step computes before parameters change.
pub struct StepEval {
    pub loss: LossBundle,
    pub grads: Gradients,
    /// Word presence vector per image, from the pre-update codebook.
    pub y_word: Vec<Vec<u8>>,
    /// Hard labels for every pixel of the batch, image-major.
    labels: Vec<usize>,
    /// `(n·h·w) × d` features of this step.
    features: Array2<f64>,
    cache: backbone::ForwardCache,
}

pub fn init_state(config: &TrainConfig, num_classes: usize, image_size: (usize, usize)) -> Result<TrainState> {
    config.validate()?;
    let bb_cfg = config.backbone_config(image_size.0, image_size.1);
    let backbone = backbone::init_backbone(&bb_cfg, config.seed)?;
    let d = bb_cfg.feature_dim();
    let (fh, fw) = bb_cfg.feature_size();
    config_pool_check(config, fh, fw)?;
    let heads = PredictionHeads::init(
        d,
        config.k,
        num_classes,
        config.strategy == Strategy::Learning,
        config.seed.wrapping_add(1),
    );
    let codebook = match config.strategy {
        Strategy::None => None,
        Strategy::Learning | Strategy::MemoryBank => {
            let mode = if config.strategy == Strategy::Learning {
                CodebookMode::Learnable
            } else {
                CodebookMode::MemoryBank
            };
            Some(match config.codebook_init {
                InitMethod::Random => codebook::init_codebook(
                    config.k,
                    d,
                    config.seed.wrapping_add(2),
                    InitMethod::Random,
                    mode,
                    None,
                )?,
                InitMethod::RandomSample => {
                    return Err(Error::Contract(
                        "random_sample initialization needs a feature pool; use init_state_with_data".into(),
                    ))
                }
            })
        }
    };
    let mut state = TrainState {
        config: config.clone(),
        num_classes,
        backbone,
        heads,
        codebook,
        velocity: Vec::new(),
        step: 0,
        epochs_done: 0,
    };
    state.velocity = state.param_slices_mut().iter().map(|s| vec![0.0; s.len()]).collect();
    Ok(state)
}

fn config_pool_check(config: &TrainConfig, fh: usize, fw: usize) -> Result<()> {
    if let Pooling::Hybrid(pc) = config.pooling_op() {
        pc.validate(fh, fw)?;
    }
    Ok(())
}

/// Like [`init_state`], but supports `random_sample` codebook initialization
/// by drawing pixel features of the initial backbone over the first batch.
pub fn init_state_with_data(config: &TrainConfig, dataset: &Dataset) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let size = (dataset.samples[0].height(), dataset.samples[0].width());
    if config.codebook_init != InitMethod::RandomSample || config.strategy == Strategy::None {
        return init_state(config, dataset.num_classes(), size);
    }
    let mut random_cfg = config.clone();
    random_cfg.codebook_init = InitMethod::Random;
    let mut state = init_state(&random_cfg, dataset.num_classes(), size)?;
    state.config = config.clone();
    let n = config.batch_size.min(dataset.len());
    let refs: Vec<&Sample> = dataset.samples[..n].iter().collect();
    let feats = backbone::extract_features(&state.backbone, &Batch::from_samples(&refs).images)?;
    let d = feats.dim().3;
    let pool = feats.into_shape_with_order((n * feats_hw(&state), d)).expect("contiguous");
    let mode = state.codebook.as_ref().unwrap().mode;
    state.codebook = Some(codebook::init_codebook(
        config.k,
        d,
        config.seed.wrapping_add(2),
        InitMethod::RandomSample,
        mode,
        Some(pool.view()),
    )?);
    Ok(state)
}

fn feats_hw(state: &TrainState) -> usize {
    let (h, w) = state.backbone.config.feature_size();
    h * w
}

impl TrainState {
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.slices_mut();
        out.extend(self.heads.slices_mut());
        if let Some(cb) = self.codebook.as_mut() {
            if cb.mode == CodebookMode::Learnable {
                out.push(cb.words.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }
}

/// Loss and gradients at the current parameters, without mutating anything.
pub fn evaluate_step(state: &TrainState, batch: &Batch) -> Result<StepEval> {
    let cfg = &state.config;
    let (feats, cache) = backbone::forward(&state.backbone, batch.images.view(), NormMode::Train)?;
    let (n, h, w, d) = feats.dim();
    let hw = h * w;
    let nf = n as f64;
    let pooling = cfg.pooling_op();
    let flat = feats
        .clone()
        .into_shape_with_order((n * hw, d))
        .expect("contiguous");

    let mut d_feats = Array4::<f64>::zeros((n, h, w, d));
    let mut g_img = Array2::<f64>::zeros(state.heads.w_img.raw_dim());
    let mut g_word = Array2::<f64>::zeros(state.heads.w_word.raw_dim());
    let mut g_w2i = state.heads.w_w2i.as_ref().map(|m| Array2::<f64>::zeros(m.raw_dim()));
    let mut g_code = state.codebook.as_ref().map(|c| Array2::<f64>::zeros(c.words.raw_dim()));
    let mut loss = LossBundle::default();
    let mut y_words = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(if state.codebook.is_some() { n * hw } else { 0 });

    for b in 0..n {
        let fmap = feats.slice(s![b, .., .., ..]);
        let fpix: ArrayView2<f64> = flat.slice(s![b * hw..(b + 1) * hw, ..]);
        let y_img = &batch.y_img[b];
        if y_img.len() != state.num_classes {
            return Err(Error::Shape(format!(
                "label vector has {} entries, model has {} classes",
                y_img.len(),
                state.num_classes
            )));
        }

        // image head
        let f_img = pooling.forward(fmap)?;
        let p_img = losses::project(f_img.view(), &state.heads.w_img);
        loss.cls_img += losses::soft_margin_loss(p_img.view(), y_img)? / nf;
        let dp_img = losses::soft_margin_grad(p_img.view(), y_img)? / nf;
        g_img += &outer(&f_img, &dp_img);
        let df_img = state.heads.w_img.dot(&dp_img);
        let mut d_map = pooling.backward(fmap, df_img.view())?;

        if let Some(cb) = &state.codebook {
            let assignment = codebook::encode(fpix, cb, cfg.tau)?;
            labels.extend_from_slice(&assignment.y);

            // word head on GAP features
            let f_gap = crate::pooling::gap(fmap);
            let p_word = losses::project(f_gap.view(), &state.heads.w_word);
            loss.cls_word += losses::soft_margin_loss(p_word.view(), &assignment.y_word)? / nf;
            let dp_word = losses::soft_margin_grad(p_word.view(), &assignment.y_word)? / nf;
            g_word += &outer(&f_gap, &dp_word);
            let df_gap = state.heads.w_word.dot(&dp_word);
            let scale = 1.0 / hw as f64;
            for mut px in d_map.lanes_mut(Axis(2)) {
                px.scaled_add(scale, &df_gap);
            }

            if cfg.strategy == Strategy::Learning {
                let w2i = state.heads.w_w2i.as_ref().expect("learning heads carry w2i");
                let p_w2i = losses::project(assignment.f_word.view(), w2i);
                loss.cls_w2i += losses::soft_margin_loss(p_w2i.view(), y_img)? / nf;
                let dp_w2i = losses::soft_margin_grad(p_w2i.view(), y_img)? / nf;
                *g_w2i.as_mut().unwrap() += &outer(&assignment.f_word, &dp_w2i);
                let df_word = w2i.dot(&dp_w2i);
                let d_p = codebook::soft_frequency_backward(&df_word, hw);
                let d_s = codebook::assign_probabilities_backward(&assignment.p, &d_p, cfg.tau);
                let (d_fpix, d_c) =
                    codebook::similarity_backward(fpix, cb.words.view(), &assignment.s, &d_s);
                *g_code.as_mut().unwrap() += &d_c;
                let d_fpix = d_fpix.into_shape_with_order((h, w, d)).expect("contiguous");
                d_map += &d_fpix;
            }
            y_words.push(assignment.y_word);
        }
        d_feats.slice_mut(s![b, .., .., ..]).assign(&d_map);
    }

    if cfg.strategy == Strategy::Learning && cfg.decov {
        let cb = state.codebook.as_ref().unwrap();
        loss.decov = losses::decov_loss(cb.words.view());
        *g_code.as_mut().unwrap() += &losses::decov_grad(cb.words.view());
    }
    loss.total = loss.cls_img + loss.cls_word + loss.cls_w2i + loss.decov;

    let (bb_grads, _) = backbone::backward(&state.backbone, &cache, &d_feats, false);
    Ok(StepEval {
        loss,
        grads: Gradients {
            backbone: bb_grads,
            w_img: g_img,
            w_word: g_word,
            w_w2i: g_w2i,
            codebook: g_code,
        },
        y_word: y_words,
        labels,
        features: flat,
        cache,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn check_finite(loss: &LossBundle, step: usize) -> Result<()> {
    for (component, value) in loss.components() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component,
                step,
                value,
            });
        }
    }
    Ok(())
}

/// One optimisation step at the given learning rates.
pub fn train_step_with_lr(
    state: &mut TrainState,
    batch: &Batch,
    lr_backbone: f64,
    lr_heads: f64,
) -> Result<LossBundle> {
    let eval = evaluate_step(state, batch)?;
    check_finite(&eval.loss, state.step)?;

    let momentum = state.config.momentum;
    let n_backbone = state.backbone.stages.len() * 3;
    let mut grads: Vec<&[f64]> = eval.grads.slices();
    let learnable_code = state
        .codebook
        .as_ref()
        .is_some_and(|c| c.mode == CodebookMode::Learnable);
    if learnable_code {
        grads.push(eval.grads.codebook.as_ref().unwrap().as_slice().unwrap());
    }
    let velocity = std::mem::take(&mut state.velocity);
    let mut velocity = velocity;
    {
        let params = state.param_slices_mut();
        debug_assert_eq!(params.len(), grads.len());
        for (i, ((p, g), v)) in params.into_iter().zip(&grads).zip(velocity.iter_mut()).enumerate() {
            let lr = if i < n_backbone { lr_backbone } else { lr_heads };
            for ((pv, gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
    state.velocity = velocity;
    state.backbone.update_running_stats(&eval.cache);

    if state.config.strategy == Strategy::MemoryBank {
        let cb = state.codebook.as_ref().unwrap();
        let c_prime = codebook::reconstruct_codebook(&eval.labels, eval.features.view(), cb)?;
        state.codebook = Some(codebook::ema_update(cb, &c_prime, state.config.rho)?);
    }
    state.step += 1;
    Ok(eval.loss)
}

/// One step at the scheduled learning rates for `max_iter` total steps.
pub fn train_step(state: &mut TrainState, batch: &Batch, max_iter: usize) -> Result<LossBundle> {
    let cfg = &state.config;
    let lr_b = lr_at(state.step, max_iter, cfg.base_lr_backbone, cfg.lr_power)?;
    let lr_h = lr_at(state.step, max_iter, cfg.base_lr_heads, cfg.lr_power)?;
    train_step_with_lr(state, batch, lr_b, lr_h)
}

/// One record per optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lr_heads: f64,
    pub cls_img: f64,
    pub cls_word: f64,
    pub cls_w2i: f64,
    pub decov: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Written after every epoch as `epoch_{e}.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON lines, one [`StepRecord`] per step.
    pub log_path: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many epochs in this call (for resumable runs).
    pub stop_after_epochs: Option<usize>,
}

/// Deterministic sample order for an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn flip_mask(seed: u64, epoch: usize, n: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf11b_0000_0000);
    rng.set_stream(epoch as u64);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

pub fn train(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<(TrainedModel, Vec<StepRecord>)> {
    let mut state = match &options.resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.state.config.hash() != config.hash() {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match requested config {}",
                    ckpt.state.config.hash(),
                    config.hash()
                )));
            }
            ckpt.state
        }
        None => init_state_with_data(config, dataset)?,
    };
    if dataset.num_classes() != state.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            state.num_classes
        )));
    }
    let n = dataset.len();
    let per_epoch = state.steps_per_epoch(n);
    let max_iter = per_epoch * config.epochs;
    let mut log_file = match &options.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(options.resume_from.is_some())
                .write(true)
                .truncate(options.resume_from.is_none())
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(max_iter);
    let last_epoch = match options.stop_after_epochs {
        Some(e) => (state.epochs_done + e).min(config.epochs),
        None => config.epochs,
    };
    for epoch in state.epochs_done..last_epoch {
        let order = epoch_order(config.seed, epoch, n);
        let flips = flip_mask(config.seed, epoch, n);
        for chunk in order.chunks(config.batch_size) {
            let flipped: Vec<Sample>;
            let refs: Vec<&Sample> = if config.hflip {
                flipped = chunk
                    .iter()
                    .map(|&i| {
                        if flips[i] {
                            dataset.samples[i].hflip()
                        } else {
                            dataset.samples[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &dataset.samples[i]).collect()
            };
            let batch = Batch::from_samples(&refs);
            let step = state.step;
            let lr = lr_at(step, max_iter, config.base_lr_backbone, config.lr_power)?;
            let lr_heads = lr_at(step, max_iter, config.base_lr_heads, config.lr_power)?;
            let loss = train_step_with_lr(&mut state, &batch, lr, lr_heads)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                lr_heads,
                cls_img: loss.cls_img,
                cls_word: loss.cls_word,
                cls_w2i: loss.cls_w2i,
                decov: loss.decov,
                total: loss.total,
            };
            if let Some((path, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            records.push(rec);
        }
        state.epochs_done = epoch + 1;
        log::info!(
            "epoch {}/{} done: step {} loss {:.4}",
            epoch + 1,
            config.epochs,
            state.step,
            records.last().map(|r| r.total).unwrap_or(f64::NAN)
        );
        if let Some(dir) = &options.checkpoint_dir {
            let ckpt = Checkpoint {
                state: state.clone(),
                metrics: BTreeMap::new(),
            };
            save_checkpoint(&ckpt, &dir.join(format!("epoch_{}.ckpt", epoch + 1)))?;
            save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
        }
    }
    if let Some((path, mut f)) = log_file {
        f.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok((TrainedModel::from_state(state), records))
}

/// Parameters needed at inference time plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub state: TrainState,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

impl TrainedModel {
    pub fn from_state(state: TrainState) -> Self {
        Self {
            config_hash: state.config.hash(),
            state,
            metrics: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.state.codebook.as_ref()
    }

    /// Inference-mode features for a list of samples, `(n, h, w, d)`.
    pub fn features(&self, samples: &[&Sample]) -> Result<Array4<f64>> {
        backbone::extract_features(&self.state.backbone, &Batch::from_samples(samples).images)
    }

    /// CAMs at feature resolution for each sample.
    pub fn cams(&self, samples: &[&Sample]) -> Result<Vec<ClassActivationMaps>> {
        let feats = self.features(samples)?;
        feats
            .outer_iter()
            .map(|f| cam::compute_cams(f, &self.state.heads.w_img))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            metrics: self.metrics.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"VWCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let st = &ckpt.state;
    let header: Header = vec![
        ("config_hash".into(), st.config.hash()),
        ("backbone_hash".into(), st.backbone.config.hash()),
        ("feature_tap".into(), backbone::FEATURE_TAP.into()),
        ("strategy".into(), st.config.strategy.name().into()),
        ("epochs_done".into(), st.epochs_done.to_string()),
        ("step".into(), st.step.to_string()),
    ];
    let mut w = persist::Writer::default();
    w.str(&serde_json::to_string(&st.config).map_err(|e| Error::Serde(e.to_string()))?);
    w.str(&serde_json::to_string(&st.backbone.config).map_err(|e| Error::Serde(e.to_string()))?);
    w.u64(st.num_classes as u64);
    w.u64(st.step as u64);
    w.u64(st.epochs_done as u64);
    for stage in &st.backbone.stages {
        w.u64(stage.stride as u64);
        w.u64(stage.weight.nrows() as u64);
        w.u64(stage.weight.ncols() as u64);
        for a in [
            stage.weight.as_slice().unwrap(),
            stage.gamma.as_slice().unwrap(),
            stage.beta.as_slice().unwrap(),
            stage.running_mean.as_slice().unwrap(),
            stage.running_var.as_slice().unwrap(),
        ] {
            w.f64s(a);
        }
    }
    for m in [Some(&st.heads.w_img), Some(&st.heads.w_word), st.heads.w_w2i.as_ref()] {
        write_matrix(&mut w, m);
    }
    match &st.codebook {
        Some(cb) => {
            w.u32(1);
            codebook::encode_codebook(cb, &mut w);
        }
        None => w.u32(0),
    }
    w.u64(st.velocity.len() as u64);
    for v in &st.velocity {
        w.f64s(v);
    }
    w.str(&serde_json::to_string(&ckpt.metrics).map_err(|e| Error::Serde(e.to_string()))?);
    persist::write_framed(path, CKPT_MAGIC, CKPT_VERSION, &header, &w.into_inner())
}

fn write_matrix(w: &mut persist::Writer, m: Option<&Array2<f64>>) {
    match m {
        Some(m) => {
            w.u32(1);
            w.u64(m.nrows() as u64);
            w.u64(m.ncols() as u64);
            w.f64s(m.as_slice().unwrap());
        }
        None => w.u32(0),
    }
}

fn read_matrix(r: &mut persist::Reader) -> Result<Option<Array2<f64>>> {
    if r.u32()? == 0 {
        return Ok(None);
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let data = r.f64s()?;
    Array2::from_shape_vec((rows, cols), data)
        .map(Some)
        .map_err(|e| Error::Validation(format!("matrix payload: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = persist::read_framed(path, CKPT_MAGIC, CKPT_VERSION)?;
    let mut r = persist::Reader::new(&payload, path);
    let config: TrainConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::format(path, e.to_string()))?;
    let bb_config: BackboneConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::format(path, e.to_string()))?;
    if header_get(&header, "config_hash") != Some(config.hash().as_str()) {
        return Err(Error::format(path, "config hash in header does not match payload"));
    }
    let num_classes = r.u64()? as usize;
    let step = r.u64()? as usize;
    let epochs_done = r.u64()? as usize;
    let mut stages = Vec::with_capacity(bb_config.widths.len());
    for _ in 0..bb_config.widths.len() {
        let stride = r.u64()? as usize;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let weight = Array2::from_shape_vec((rows, cols), r.f64s()?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let gamma = Array1::from(r.f64s()?);
        let beta = Array1::from(r.f64s()?);
        let running_mean = Array1::from(r.f64s()?);
        let running_var = Array1::from(r.f64s()?);
        stages.push(backbone::Stage {
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
        });
    }
    let w_img = read_matrix(&mut r)?.ok_or_else(|| Error::format(path, "missing image head"))?;
    let w_word = read_matrix(&mut r)?.ok_or_else(|| Error::format(path, "missing word head"))?;
    let w_w2i = read_matrix(&mut r)?;
    let codebook = if r.u32()? == 1 {
        Some(codebook::decode_codebook(&mut r)?)
    } else {
        None
    };
    let nv = r.u64()? as usize;
    let velocity = (0..nv).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
    let metrics: BTreeMap<String, f64> =
        serde_json::from_str(&r.str()?).map_err(|e| Error::format(path, e.to_string()))?;
    r.finish()?;
    Ok(Checkpoint {
        state: TrainState {
            config,
            num_classes,
            backbone: BackboneParams {
                config: bb_config,
                stages,
            },
            heads: PredictionHeads {
                w_img,
                w_word,
                w_w2i,
            },
            codebook,
            velocity,
            step,
            epochs_done,
        },
        metrics,
    })
}

impl From<Checkpoint> for TrainedModel {
    fn from(ckpt: Checkpoint) -> Self {
        Self {
            config_hash: ckpt.state.config.hash(),
            state: ckpt.state,
            metrics: ckpt.metrics,
        }
    }
}
