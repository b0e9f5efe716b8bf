//! Deterministic synthetic multi-label shapes dataset.
//!
//! Each image holds 1 to 3 non-overlapping shapes on a low-contrast textured
//! background. Shape kind identifies the class; colors are random so that
//! color alone never identifies a class. Two-tone shapes carry a distinct
//! interior color so objects decompose into parts.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::hash_of;

pub const MAX_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Hexagon,
    HalfDisk,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; MAX_CLASSES] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Hexagon,
        ShapeKind::HalfDisk,
    ];

    /// Class id ↔ kind is the identity on the `ALL` ordering.
    pub fn from_class(class_id: usize) -> ShapeKind {
        Self::ALL[class_id]
    }

    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::HalfDisk => "half_disk",
        }
    }

    /// Membership test in shape-local coordinates where the shape is
    /// inscribed in the unit disk.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.70 && v.abs() <= 0.70,
            ShapeKind::Triangle => polygon_contains(u, v, 3, -PI / 2.0),
            ShapeKind::Ring => (0.55 * 0.55..=1.0).contains(&r2),
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Hexagon => polygon_contains(u, v, 6, PI / 6.0),
            ShapeKind::HalfDisk => r2 <= 1.0 && v >= 0.0,
        }
    }

    /// Interior part used by two-tone fills.
    fn interior(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Ring => u * u + v * v <= 0.775 * 0.775,
            _ => self.contains(u / 0.55, v / 0.55),
        }
    }
}

/// Regular polygon with unit circumradius; `normal0` is the angle of the
/// first edge normal.
fn polygon_contains(u: f64, v: f64, sides: usize, normal0: f64) -> bool {
    let apothem = (PI / sides as f64).cos();
    (0..sides).all(|i| {
        let a = normal0 + 2.0 * PI * i as f64 / sides as f64;
        u * a.cos() + v * a.sin() <= apothem
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStyle {
    Solid,
    TwoTone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub kind: ShapeKind,
    pub fill: FillStyle,
    /// Normalized (x, y) in [0, 1].
    pub center: (f64, f64),
    /// Circumradius as a fraction of the image side.
    pub size: f64,
    pub rotation: f64,
    pub border_color: [f64; 3],
    pub interior_color: [f64; 3],
}

impl ShapeSpec {
    pub fn fits_canvas(&self) -> bool {
        let (x, y) = self.center;
        x - self.size >= 0.0 && x + self.size <= 1.0 && y - self.size >= 0.0 && y + self.size <= 1.0
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.center.0) / self.size, (y - self.center.1) / self.size);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub two_tone_prob: f64,
    pub backgrounds: Vec<Background>,
    /// Stride of the backbone that will consume the images.
    pub total_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            num_samples: 2200,
            min_shapes: 1,
            max_shapes: 3,
            min_size: 0.13,
            max_size: 0.22,
            two_tone_prob: 0.7,
            backgrounds: vec![Background::Flat, Background::Gradient, Background::Speckle],
            total_stride: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.total_stride;
        if s == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by total stride {}",
                self.height, self.width, s
            )));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in [2, {MAX_CLASSES}], got {}",
                self.num_classes
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(Error::Config(format!(
                "shapes per image must satisfy 1 <= min <= max <= 3, got {}..={}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 0.5) {
            return Err(Error::Config(format!(
                "shape size range ({}, {}) must satisfy 0 < min <= max < 0.5",
                self.min_size, self.max_size
            )));
        }
        if !(0.0..=1.0).contains(&self.two_tone_prob) {
            return Err(Error::Config("two_tone_prob must be in [0, 1]".into()));
        }
        if self.backgrounds.is_empty() {
            return Err(Error::Config("at least one background family is required".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| ShapeKind::from_class(c).name().to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 8-bit RGB, H × W × 3. Real-valued view is `value / 255`.
    pub image: Array3<u8>,
    /// 0 = background, c + 1 = class c.
    pub gt_mask: Array2<u8>,
    pub y_img: Vec<u8>,
    pub shapes: Vec<ShapeSpec>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Image as reals in [0, 1].
    pub fn image_f64(&self) -> Array3<f64> {
        self.image.mapv(|v| v as f64 / 255.0)
    }

    pub fn present_classes(&self) -> Vec<usize> {
        self.y_img
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(c, _)| c)
            .collect()
    }

    /// Mirror left-right; labels are unchanged.
    pub fn hflip(&self) -> Sample {
        let mut image = self.image.clone();
        image.invert_axis(ndarray::Axis(1));
        let mut gt_mask = self.gt_mask.clone();
        gt_mask.invert_axis(ndarray::Axis(1));
        Sample {
            image: image.as_standard_layout().to_owned(),
            gt_mask: gt_mask.as_standard_layout().to_owned(),
            y_img: self.y_img.clone(),
            shapes: self.shapes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub config: DataConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            seed: self.seed,
            class_names: self.class_names.clone(),
            config: self.config.clone(),
        }
    }

    /// Partition into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (
            self.with_samples(self.samples[..n].to_vec()),
            self.with_samples(self.samples[n..].to_vec()),
        )
    }
}

/// Generates `config.num_samples` samples. Sample `i` draws from ChaCha
/// stream `i` of `seed`, so any prefix is independent of the total count.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.num_samples)
        .map(|i| generate_sample(config, seed, i as u64))
        .collect();
    Ok(Dataset {
        samples,
        seed,
        class_names: config.class_names(),
        config: config.clone(),
    })
}

/// Ordered split into sizes ⌈n·f⌉ and n − ⌈n·f⌉.
pub fn split(dataset: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (dataset.len() as f64 * train_fraction).ceil() as usize;
    Ok(dataset.split_at(n_train))
}

fn generate_sample(config: &DataConfig, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let (h, w) = (config.height, config.width);
    let mut image = render_background(config, &mut rng);

    let wanted = rng.random_range(config.min_shapes..=config.max_shapes);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while shapes.len() < wanted && attempts < 200 {
        attempts += 1;
        let candidate = random_shape(config, &mut rng);
        let clear = shapes.iter().all(|s| {
            let (dx, dy) = (s.center.0 - candidate.center.0, s.center.1 - candidate.center.1);
            (dx * dx + dy * dy).sqrt() >= s.size + candidate.size + 0.03
        });
        if clear {
            shapes.push(candidate);
        }
    }

    let mut gt_mask = Array2::<u8>::zeros((h, w));
    for shape in &shapes {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = shape.local((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                if !shape.kind.contains(u, v) {
                    continue;
                }
                gt_mask[[y, x]] = (shape.class_id + 1) as u8;
                let color = if shape.fill == FillStyle::TwoTone && shape.kind.interior(u, v) {
                    shape.interior_color
                } else {
                    shape.border_color
                };
                for ch in 0..3 {
                    image[[y, x, ch]] = color[ch];
                }
            }
        }
    }

    let mut y_img = vec![0u8; config.num_classes];
    for &m in gt_mask.iter() {
        if m > 0 {
            y_img[m as usize - 1] = 1;
        }
    }
    Sample {
        image: image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        gt_mask,
        y_img,
        shapes,
    }
}

fn render_background(config: &DataConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w) = (config.height, config.width);
    let kind = config.backgrounds[rng.random_range(0..config.backgrounds.len())];
    let base = rng.random_range(0.35..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let mut img = Array3::<f64>::zeros((h, w, 3));
    match kind {
        Background::Flat => {
            for ((_, _, c), v) in img.indexed_iter_mut() {
                *v = base + tint[c];
            }
        }
        Background::Gradient => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.06..0.12);
            let (s, co) = angle.sin_cos();
            for ((y, x, c), v) in img.indexed_iter_mut() {
                let t = (x as f64 / w as f64 - 0.5) * co + (y as f64 / h as f64 - 0.5) * s;
                *v = base + tint[c] + amp * t;
            }
        }
        Background::Speckle => {
            let amp = rng.random_range(0.03..0.07);
            for y in 0..h {
                for x in 0..w {
                    let n = rng.random_range(-amp..amp);
                    for c in 0..3 {
                        img[[y, x, c]] = base + tint[c] + n;
                    }
                }
            }
        }
    }
    img
}

fn random_shape(config: &DataConfig, rng: &mut ChaCha8Rng) -> ShapeSpec {
    let class_id = rng.random_range(0..config.num_classes);
    let size = rng.random_range(config.min_size..=config.max_size);
    let center = (
        rng.random_range(size..=1.0 - size),
        rng.random_range(size..=1.0 - size),
    );
    let fill = if rng.random_bool(config.two_tone_prob) {
        FillStyle::TwoTone
    } else {
        FillStyle::Solid
    };
    let hue = rng.random_range(0.0..360.0);
    let border_color = hsv(hue, rng.random_range(0.6..1.0), rng.random_range(0.65..1.0));
    let interior_color = match fill {
        FillStyle::Solid => border_color,
        FillStyle::TwoTone => {
            let shift = rng.random_range(90.0..270.0);
            hsv(
                (hue + shift) % 360.0,
                rng.random_range(0.6..1.0),
                rng.random_range(0.65..1.0),
            )
        }
    };
    ShapeSpec {
        class_id,
        kind: ShapeKind::from_class(class_id),
        fill,
        center,
        size,
        rotation: rng.random_range(0.0..2.0 * PI),
        border_color,
        interior_color,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    config_hash: String,
    class_names: Vec<String>,
    config: DataConfig,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image: String,
    mask: String,
    y_img: Vec<u8>,
    shapes: Vec<ShapeSpec>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";
const MANIFEST_FORMAT: &str = "vwcam-dataset-v1";

/// Writes `images/NNNNNN.png`, `masks/NNNNNN.png` and `manifest.toml`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let name = format!("{i:06}.png");
        crate::imageio::write_rgb(&images.join(&name), &sample.image)?;
        crate::imageio::write_mask(&masks.join(&name), &sample.gt_mask)?;
        entries.push(ManifestEntry {
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            y_img: sample.y_img.clone(),
            shapes: sample.shapes.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: dataset.seed,
        config_hash: dataset.config.hash(),
        class_names: dataset.class_names.clone(),
        config: dataset.config.clone(),
        samples: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Version {
            path,
            expected: MANIFEST_FORMAT.into(),
            found: manifest.format,
        });
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::format(&path, "config hash does not match config"));
    }
    let samples = manifest
        .samples
        .into_iter()
        .map(|entry| {
            let image = crate::imageio::read_rgb(&dir.join(&entry.image))?;
            let gt_mask = crate::imageio::read_mask(&dir.join(&entry.mask))?;
            Ok(Sample {
                image,
                gt_mask,
                y_img: entry.y_img,
                shapes: entry.shapes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        seed: manifest.seed,
        class_names: manifest.class_names,
        config: manifest.config,
    })
}
