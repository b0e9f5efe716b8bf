//! Class activation maps, background-threshold pseudo labels, resizing and
//! heatmap export.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

pub const DEFAULT_THETA_BG: f64 = 0.3;

/// Per-class maps, all `L × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMaps {
    pub raw: Array3<f64>,
    pub rectified: Array3<f64>,
    /// Rectified maps divided by their per-class maximum (zero maps stay zero).
    pub normalized: Array3<f64>,
}

impl ClassActivationMaps {
    pub fn from_raw(raw: Array3<f64>) -> Self {
        let rectified = raw.mapv(|v| v.max(0.0));
        let mut normalized = rectified.clone();
        for mut plane in normalized.outer_iter_mut() {
            let max = plane.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                plane /= max;
            }
        }
        Self {
            raw,
            rectified,
            normalized,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.raw.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.raw.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMask {
    /// 0 = background, `c + 1` = class `c`.
    pub labels: Array2<u8>,
    pub theta_bg: f64,
}

/// `raw[c] = Σ_i W[i][c]·F[:, :, i]`.
pub fn compute_cams(features: ArrayView3<f64>, w_img: &Array2<f64>) -> Result<ClassActivationMaps> {
    let (h, w, d) = features.dim();
    if w_img.nrows() != d {
        return Err(Error::Shape(format!(
            "feature map has {d} channels but classifier expects {}",
            w_img.nrows()
        )));
    }
    let flat = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, d))
        .expect("contiguous");
    let scores = flat.dot(w_img); // (hw, L)
    let l = w_img.ncols();
    let raw = Array3::from_shape_fn((l, h, w), |(c, y, x)| scores[[y * w + x, c]]);
    Ok(ClassActivationMaps::from_raw(raw))
}

/// Per pixel: the present class with the highest normalized score if that
/// score reaches `theta_bg`, otherwise background. Ties go to the lowest
/// class id.
pub fn pseudo_labels(
    cams: &ClassActivationMaps,
    present: &[usize],
    theta_bg: f64,
) -> Result<PseudoLabelMask> {
    if present.is_empty() {
        return Err(Error::Contract("pseudo labels need at least one present class".into()));
    }
    if !(theta_bg >= 0.0) || !theta_bg.is_finite() {
        return Err(Error::Parameter(format!("background threshold must be >= 0, got {theta_bg}")));
    }
    let l = cams.num_classes();
    if let Some(&c) = present.iter().find(|&&c| c >= l) {
        return Err(Error::Shape(format!("present class {c} out of range for {l} maps")));
    }
    let mut classes = present.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let (h, w) = cams.size();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = classes[0];
        for &c in &classes[1..] {
            if cams.normalized[[c, y, x]] > cams.normalized[[best, y, x]] {
                best = c;
            }
        }
        if cams.normalized[[best, y, x]] >= theta_bg {
            (best + 1) as u8
        } else {
            0
        }
    });
    Ok(PseudoLabelMask { labels, theta_bg })
}

/// Nearest-neighbour resize of an integer mask.
pub fn upsample_mask(mask: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        mask[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Half-pixel-centred bilinear resize of each plane of an `L × h × w` tensor.
pub fn bilinear_resize(maps: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (l, h, w) = maps.dim();
    if (h, w) == (height, width) {
        return maps.clone();
    }
    let coord = |o: usize, out: usize, inp: usize| {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..height).map(|y| coord(y, height, h)).collect();
    let xs: Vec<_> = (0..width).map(|x| coord(x, width, w)).collect();
    Array3::from_shape_fn((l, height, width), |(c, y, x)| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = maps[[c, y0, x0]] * (1.0 - tx) + maps[[c, y0, x1]] * tx;
        let bottom = maps[[c, y1, x0]] * (1.0 - tx) + maps[[c, y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Resizes the raw maps bilinearly and re-derives rectified and normalized.
pub fn upsample_cams(cams: &ClassActivationMaps, height: usize, width: usize) -> ClassActivationMaps {
    if cams.size() == (height, width) {
        return cams.clone();
    }
    ClassActivationMaps::from_raw(bilinear_resize(&cams.raw, height, width))
}

/// Jet-style colormap on [0, 1].
fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Blend weight is half the normalized score, so a zero map leaves the
/// input untouched.
pub fn blend_heatmap(image: &Array3<u8>, normalized: ndarray::ArrayView2<f64>) -> Array3<u8> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let s = normalized[[y, x]];
        let alpha = 0.5 * s;
        let base = image[[y, x, ch]] as f64 / 255.0;
        let v = (1.0 - alpha) * base + alpha * colormap(s)[ch];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// One `{prefix}_{class}.png` per present class.
pub fn export_heatmaps(
    image: &Array3<u8>,
    cams: &ClassActivationMaps,
    present: &[usize],
    class_names: &[String],
    prefix: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (h, w, _) = image.dim();
    let full = upsample_cams(cams, h, w);
    let mut files = Vec::with_capacity(present.len());
    for &c in present {
        let name = class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class{c}"));
        let path = out_dir.join(format!("{prefix}_{name}.png"));
        let blended = blend_heatmap(image, full.normalized.index_axis(ndarray::Axis(0), c));
        crate::imageio::write_rgb(&path, &blended)?;
        files.push(path);
    }
    Ok(files)
}
