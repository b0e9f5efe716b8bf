//! Independent brute-force oracles, finite-difference helpers and the
//! criterion checks shared by the test targets.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vwcam::cam::{self, ClassActivationMaps};
use vwcam::codebook::{self, Codebook, CodebookMode};
use vwcam::eval;
use vwcam::losses;
use vwcam::pooling::{self, PoolConfig};

pub type Check = std::result::Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

pub fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0..1.0))
}

pub fn rand_codebook(rng: &mut ChaCha8Rng, k: usize, d: usize, mode: CodebookMode) -> Codebook {
    Codebook::new(rand_mat(rng, k, d), mode).expect("random rows are nonzero")
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(name: &str, trial: usize, err: f64, tol: f64) -> Check {
    if err <= tol && err.is_finite() {
        Ok(())
    } else {
        Err(format!("{name}: trial {trial} error {err:e} exceeds {tol:e}"))
    }
}

fn exact<T: PartialEq + std::fmt::Debug>(name: &str, trial: usize, a: &T, b: &T) -> Check {
    if a == b {
        Ok(())
    } else {
        Err(format!("{name}: trial {trial} mismatch {a:?} vs {b:?}"))
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

pub fn oracle_similarity(f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let (n, d) = f.dim();
    let k = c.nrows();
    let mut s = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let (mut dot, mut nf, mut nc) = (0.0, 0.0, 0.0);
            for t in 0..d {
                dot += f[[i, t]] * c[[j, t]];
                nf += f[[i, t]] * f[[i, t]];
                nc += c[[j, t]] * c[[j, t]];
            }
            s[[i, j]] = dot / (nf.sqrt() * nc.sqrt());
        }
    }
    s
}

pub fn oracle_softmax(s: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut p = Array2::zeros(s.raw_dim());
    for i in 0..s.nrows() {
        let mut z = 0.0;
        for j in 0..s.ncols() {
            z += (tau * s[[i, j]]).exp();
        }
        for j in 0..s.ncols() {
            p[[i, j]] = (tau * s[[i, j]]).exp() / z;
        }
    }
    p
}

pub fn oracle_column_means(p: &Array2<f64>) -> Vec<f64> {
    (0..p.ncols())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..p.nrows() {
                acc += p[[i, j]];
            }
            acc / p.nrows() as f64
        })
        .collect()
}

/// One mini-batch k-means step: cosine assignment, then per-group means.
pub fn oracle_kmeans_step(f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let s = oracle_similarity(f, c);
    let mut assign = Vec::new();
    for i in 0..f.nrows() {
        let mut best = 0;
        for j in 1..c.nrows() {
            if s[[i, j]] > s[[i, best]] {
                best = j;
            }
        }
        assign.push(best);
    }
    oracle_group_means(&assign, f, c)
}

pub fn oracle_group_means(assign: &[usize], f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let mut out = c.clone();
    for j in 0..c.nrows() {
        let members: Vec<usize> = (0..f.nrows()).filter(|&i| assign[i] == j).collect();
        if members.is_empty() {
            continue;
        }
        for t in 0..c.ncols() {
            let mut acc = 0.0;
            for &i in &members {
                acc += f[[i, t]];
            }
            out[[j, t]] = acc / members.len() as f64;
        }
    }
    out
}

pub fn oracle_local_max(f: &Array3<f64>, r: usize) -> Array3<f64> {
    let (h, w, d) = f.dim();
    let (bh, bw) = (h / r, w / r);
    let mut out = Array3::zeros((r, r, d));
    for by in 0..r {
        for bx in 0..r {
            for c in 0..d {
                let mut m = f64::NEG_INFINITY;
                for y in by * bh..(by + 1) * bh {
                    for x in bx * bw..(bx + 1) * bw {
                        if f[[y, x, c]] > m {
                            m = f[[y, x, c]];
                        }
                    }
                }
                out[[by, bx, c]] = m;
            }
        }
    }
    out
}

pub fn oracle_gap(f: &Array3<f64>) -> Vec<f64> {
    let (h, w, d) = f.dim();
    (0..d)
        .map(|c| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += f[[y, x, c]];
                }
            }
            acc / (h * w) as f64
        })
        .collect()
}

pub fn oracle_branch(f: &Array3<f64>, r: usize) -> Vec<f64> {
    let m = oracle_local_max(f, r);
    (0..f.dim().2)
        .map(|c| {
            let mut acc = 0.0;
            for by in 0..r {
                for bx in 0..r {
                    acc += m[[by, bx, c]];
                }
            }
            acc / (r * r) as f64
        })
        .collect()
}

pub fn oracle_hybrid(f: &Array3<f64>, splits: &[usize], gamma: f64) -> Vec<f64> {
    let g = oracle_gap(f);
    let branches: Vec<Vec<f64>> = splits.iter().map(|&r| oracle_branch(f, r)).collect();
    (0..g.len())
        .map(|c| {
            let sum: f64 = branches.iter().map(|b| b[c]).sum();
            (sum + gamma * g[c]) / (gamma + splits.len() as f64)
        })
        .collect()
}

pub fn oracle_gwrp(f: &Array3<f64>, decay: f64) -> Vec<f64> {
    let (h, w, d) = f.dim();
    (0..d)
        .map(|c| {
            let mut v: Vec<f64> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    v.push(f[[y, x, c]]);
                }
            }
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let (mut num, mut den) = (0.0, 0.0);
            for (t, &x) in v.iter().enumerate() {
                let wt = decay.powi(t as i32);
                num += wt * x;
                den += wt;
            }
            num / den
        })
        .collect()
}

pub fn oracle_lse(f: &Array3<f64>, s: f64) -> Vec<f64> {
    let (h, w, d) = f.dim();
    (0..d)
        .map(|c| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += (s * f[[y, x, c]]).exp();
                }
            }
            (acc / (h * w) as f64).ln() / s
        })
        .collect()
}

pub fn oracle_soft_margin(p: &[f64], y: &[u8]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let sig = 1.0 / (1.0 + (-pi).exp());
        let yi = yi as f64;
        acc += yi * sig.ln() + (1.0 - yi) * (1.0 - sig).ln();
    }
    -acc / p.len() as f64
}

pub fn oracle_covariance(c: &Array2<f64>) -> Array2<f64> {
    let (k, d) = c.dim();
    let mut mean = vec![0.0; k];
    for i in 0..k {
        for t in 0..d {
            mean[i] += c[[i, t]];
        }
        mean[i] /= d as f64;
    }
    let mut cov = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for t in 0..d {
                acc += (c[[i, t]] - mean[i]) * (c[[j, t]] - mean[j]);
            }
            cov[[i, j]] = acc / d as f64;
        }
    }
    cov
}

pub fn oracle_decov(c: &Array2<f64>) -> f64 {
    let cov = oracle_covariance(c);
    let mut acc = 0.0;
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            if i != j {
                acc += cov[[i, j]] * cov[[i, j]];
            }
        }
    }
    0.5 * acc
}

pub fn oracle_cams(f: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (h, wd, d) = f.dim();
    let l = w.ncols();
    let mut out = Array3::zeros((l, h, wd));
    for c in 0..l {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += w[[i, c]] * f[[y, x, i]];
                }
                out[[c, y, x]] = acc;
            }
        }
    }
    out
}

pub fn oracle_pseudo_labels(raw: &Array3<f64>, present: &[usize], theta: f64) -> Array2<u8> {
    let (l, h, w) = raw.dim();
    let mut norm = Array3::zeros((l, h, w));
    for c in 0..l {
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                m = m.max(raw[[c, y, x]].max(0.0));
            }
        }
        for y in 0..h {
            for x in 0..w {
                norm[[c, y, x]] = if m > 0.0 { raw[[c, y, x]].max(0.0) / m } else { 0.0 };
            }
        }
    }
    let mut sorted = present.to_vec();
    sorted.sort_unstable();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut label = 0u8;
        let mut best = f64::NEG_INFINITY;
        for &c in &sorted {
            if norm[[c, y, x]] >= theta && norm[[c, y, x]] > best {
                best = norm[[c, y, x]];
                label = c as u8 + 1;
            }
        }
        label
    })
}

pub fn oracle_miou(pred: &[Array2<u8>], gt: &[Array2<u8>], l: usize) -> Vec<f64> {
    (0..=l as u8)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, g) in pred.iter().zip(gt) {
                for (&a, &b) in p.iter().zip(g.iter()) {
                    match (a == c, b == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            if tp + fp + fn_ == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp + fn_) as f64
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Operator oracle checks
// ---------------------------------------------------------------------------

pub const ORACLE_TRIALS: usize = 100;

pub fn check_similarity(trials: usize) -> Check {
    let mut r = rng(11);
    for t in 0..trials {
        let (n, k, d) = (r.random_range(1..12), r.random_range(2..7), r.random_range(2..9));
        let f = rand_mat(&mut r, n, d);
        let cb = rand_codebook(&mut r, k, d, CodebookMode::Learnable);
        let s = codebook::similarity(f.view(), &cb).map_err(|e| e.to_string())?;
        within("similarity", t, max_abs_diff(&s, &oracle_similarity(&f, &cb.words)), 1e-6)?;
    }
    Ok(())
}

pub fn check_assign_probabilities(trials: usize) -> Check {
    let mut r = rng(12);
    for t in 0..trials {
        let (n, k) = (r.random_range(1..12), r.random_range(2..9));
        let s = rand_mat(&mut r, n, k);
        let tau = uniform(&mut r, 0.1, 20.0);
        let p = codebook::assign_probabilities(&s, tau).map_err(|e| e.to_string())?;
        within("assign_probabilities", t, max_abs_diff(&p, &oracle_softmax(&s, tau)), 1e-6)?;
    }
    Ok(())
}

pub fn check_soft_frequency(trials: usize) -> Check {
    let mut r = rng(13);
    for t in 0..trials {
        let (n, k) = (r.random_range(1..30), r.random_range(2..9));
        let s = rand_mat(&mut r, n, k);
        let p = oracle_softmax(&s, uniform(&mut r, 0.5, 5.0));
        let f = codebook::soft_frequency(&p);
        within("soft_frequency", t, max_abs_diff(&f, &oracle_column_means(&p)), 1e-6)?;
    }
    Ok(())
}

pub fn check_reconstruct_codebook(trials: usize) -> Check {
    let mut r = rng(14);
    for t in 0..trials {
        let (n, k, d) = (r.random_range(1..40), r.random_range(2..8), r.random_range(2..7));
        let f = rand_mat(&mut r, n, d);
        let cb = rand_codebook(&mut r, k, d, CodebookMode::MemoryBank);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let got = codebook::reconstruct_codebook(&labels, f.view(), &cb).map_err(|e| e.to_string())?;
        within("reconstruct_codebook", t, max_abs_diff(&got, &oracle_group_means(&labels, &f, &cb.words)), 1e-6)?;
    }
    Ok(())
}

pub fn check_ema_update(trials: usize) -> Check {
    let mut r = rng(15);
    for t in 0..trials {
        let (k, d) = (r.random_range(2..8), r.random_range(2..7));
        let cb = rand_codebook(&mut r, k, d, CodebookMode::MemoryBank);
        let target = rand_mat(&mut r, k, d);
        let rho = uniform(&mut r, 1e-3, 1.0);
        let next = codebook::ema_update(&cb, &target, rho).map_err(|e| e.to_string())?;
        let want = Array2::from_shape_fn((k, d), |(i, j)| rho * target[[i, j]] + (1.0 - rho) * cb.words[[i, j]]);
        within("ema_update", t, max_abs_diff(&next.words, &want), 1e-6)?;
        exact("ema_update count", t, &next.update_count, &(cb.update_count + 1))?;
    }
    Ok(())
}

fn rand_split_map(r: &mut ChaCha8Rng) -> (Array3<f64>, usize) {
    let rs = [1usize, 2, 4];
    let split = rs[r.random_range(0..3)];
    let mult = [4usize, 8];
    let h = mult[r.random_range(0..2)];
    let w = mult[r.random_range(0..2)];
    let d = r.random_range(1..5);
    (rand_map(r, h, w, d), split)
}

pub fn check_local_max_pool(trials: usize) -> Check {
    let mut r = rng(16);
    for t in 0..trials {
        let (f, split) = rand_split_map(&mut r);
        let got = pooling::local_max_pool(f.view(), split).map_err(|e| e.to_string())?;
        exact("local_max_pool", t, &got, &oracle_local_max(&f, split))?;
    }
    Ok(())
}

pub fn check_branch_pool(trials: usize) -> Check {
    let mut r = rng(17);
    for t in 0..trials {
        let (f, split) = rand_split_map(&mut r);
        let got = pooling::branch_pool(f.view(), split).map_err(|e| e.to_string())?;
        within("branch_pool", t, max_abs_diff(&got, &oracle_branch(&f, split)), 1e-6)?;
    }
    Ok(())
}

pub fn check_hybrid_pool(trials: usize) -> Check {
    let mut r = rng(18);
    let sets: [&[usize]; 4] = [&[1], &[1, 2], &[1, 4], &[1, 2, 4]];
    for t in 0..trials {
        let (f, _) = rand_split_map(&mut r);
        let splits = sets[r.random_range(0..4)].to_vec();
        let gamma = uniform(&mut r, 0.0, 5.0);
        let cfg = PoolConfig {
            split_sizes: splits.clone(),
            gamma,
        };
        let got = pooling::hybrid_pool(f.view(), &cfg).map_err(|e| e.to_string())?;
        within("hybrid_pool", t, max_abs_diff(&got, &oracle_hybrid(&f, &splits, gamma)), 1e-6)?;
    }
    Ok(())
}

pub fn check_gwrp(trials: usize) -> Check {
    let mut r = rng(19);
    for t in 0..trials {
        let (f, _) = rand_split_map(&mut r);
        let decay = uniform(&mut r, 0.05, 0.999);
        let got = pooling::gwrp(f.view(), decay).map_err(|e| e.to_string())?;
        within("gwrp", t, max_abs_diff(&got, &oracle_gwrp(&f, decay)), 1e-6)?;
    }
    Ok(())
}

pub fn check_lse(trials: usize) -> Check {
    let mut r = rng(20);
    for t in 0..trials {
        let (f, _) = rand_split_map(&mut r);
        let s = uniform(&mut r, 0.1, 20.0);
        let got = pooling::lse(f.view(), s).map_err(|e| e.to_string())?;
        within("lse", t, max_abs_diff(&got, &oracle_lse(&f, s)), 1e-6)?;
    }
    Ok(())
}

pub fn check_soft_margin_loss(trials: usize) -> Check {
    let mut r = rng(21);
    for t in 0..trials {
        let l = r.random_range(1..9);
        let p: Vec<f64> = (0..l).map(|_| uniform(&mut r, -8.0, 8.0)).collect();
        let y: Vec<u8> = (0..l).map(|_| r.random_range(0..2)).collect();
        let got = losses::soft_margin_loss(Array1::from(p.clone()).view(), &y).map_err(|e| e.to_string())?;
        within("soft_margin_loss", t, (got - oracle_soft_margin(&p, &y)).abs(), 1e-9)?;
    }
    Ok(())
}

pub fn check_decov_loss(trials: usize) -> Check {
    let mut r = rng(22);
    for t in 0..trials {
        let (k, d) = (r.random_range(2..8), r.random_range(2..10));
        let c = rand_mat(&mut r, k, d);
        within("row_covariance", t, max_abs_diff(&losses::row_covariance(c.view()), &oracle_covariance(&c)), 1e-9)?;
        within("decov_loss", t, (losses::decov_loss(c.view()) - oracle_decov(&c)).abs(), 1e-9)?;
    }
    Ok(())
}

pub fn check_compute_cams(trials: usize) -> Check {
    let mut r = rng(23);
    for t in 0..trials {
        let (h, w, d, l) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..8), r.random_range(1..5));
        let f = rand_map(&mut r, h, w, d);
        let wm = rand_mat(&mut r, d, l);
        let cams = cam::compute_cams(f.view(), &wm).map_err(|e| e.to_string())?;
        let raw = oracle_cams(&f, &wm);
        within("compute_cams", t, max_abs_diff(&cams.raw, &raw), 1e-6)?;
        let rect = raw.mapv(|v| v.max(0.0));
        within("compute_cams rectified", t, max_abs_diff(&cams.rectified, &rect), 1e-6)?;
    }
    Ok(())
}

pub fn check_pseudo_labels(trials: usize) -> Check {
    let mut r = rng(24);
    for t in 0..trials {
        let (l, h, w) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..7));
        let raw = Array3::from_shape_fn((l, h, w), |_| r.random_range(-1.0..1.0));
        let mut present: Vec<usize> = (0..l).filter(|_| r.random_bool(0.6)).collect();
        if present.is_empty() {
            present.push(r.random_range(0..l));
        }
        let theta = uniform(&mut r, 0.0, 1.0);
        let cams = ClassActivationMaps::from_raw(raw.clone());
        let got = cam::pseudo_labels(&cams, &present, theta).map_err(|e| e.to_string())?;
        exact("pseudo_labels", t, &got.labels, &oracle_pseudo_labels(&raw, &present, theta))?;
    }
    Ok(())
}

pub fn check_miou(trials: usize) -> Check {
    let mut r = rng(25);
    for t in 0..trials {
        let l = r.random_range(1..5);
        let n = r.random_range(1..4);
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let mut mk = || Array2::from_shape_fn((h, w), |_| r.random_range(0..=l as u8));
        let pred: Vec<_> = (0..n).map(|_| mk()).collect();
        let gt: Vec<_> = (0..n).map(|_| mk()).collect();
        let rep = eval::miou(&pred, &gt, l).map_err(|e| e.to_string())?;
        let want = oracle_miou(&pred, &gt, l);
        exact("miou per class", t, &rep.per_class_iou, &want)?;
        let mean = want.iter().sum::<f64>() / want.len() as f64;
        within("miou mean", t, (rep.miou - mean).abs(), 1e-12)?;
    }
    Ok(())
}

/// Every operator oracle, in a fixed order.
pub fn operator_checks(trials: usize) -> Vec<(&'static str, Check)> {
    vec![
        ("similarity", check_similarity(trials)),
        ("assign_probabilities", check_assign_probabilities(trials)),
        ("soft_frequency", check_soft_frequency(trials)),
        ("reconstruct_codebook", check_reconstruct_codebook(trials)),
        ("ema_update", check_ema_update(trials)),
        ("local_max_pool", check_local_max_pool(trials)),
        ("branch_pool", check_branch_pool(trials)),
        ("hybrid_pool", check_hybrid_pool(trials)),
        ("gwrp", check_gwrp(trials)),
        ("lse", check_lse(trials)),
        ("soft_margin_loss", check_soft_margin_loss(trials)),
        ("decov_loss", check_decov_loss(trials)),
        ("compute_cams", check_compute_cams(trials)),
        ("pseudo_labels", check_pseudo_labels(trials)),
        ("miou", check_miou(trials)),
    ]
}

/// A memory-bank step at ρ = 1 equals a mini-batch k-means step, bitwise.
pub fn check_kmeans_equivalence(trials: usize) -> Check {
    let mut r = rng(26);
    for t in 0..trials {
        let (n, k, d) = (r.random_range(4..64), r.random_range(2..9), r.random_range(2..9));
        let f = rand_mat(&mut r, n, d);
        let cb = rand_codebook(&mut r, k, d, CodebookMode::MemoryBank);
        let wa = codebook::encode(f.view(), &cb, uniform(&mut r, 0.5, 4.0)).map_err(|e| e.to_string())?;
        let c_prime = codebook::reconstruct_codebook(&wa.y, f.view(), &cb).map_err(|e| e.to_string())?;
        let next = codebook::ema_update(&cb, &c_prime, 1.0).map_err(|e| e.to_string())?;
        exact("kmeans step", t, &next.words, &oracle_kmeans_step(&f, &cb.words))?;
    }
    Ok(())
}

/// Limiting behaviour of the pooling family on random `side × side` maps.
pub fn limit_checks(side: usize) -> Vec<(&'static str, Check)> {
    let mut r = rng(27);
    let maps: Vec<Array3<f64>> = (0..20)
        .map(|_| {
            let d = r.random_range(1..6);
            rand_map(&mut r, side, side, d)
        })
        .collect();
    let run = |name: &'static str, tol: f64, f: &dyn Fn(&Array3<f64>) -> (Array1<f64>, Array1<f64>)| {
        let mut worst: f64 = 0.0;
        for m in &maps {
            let (a, b) = f(m);
            worst = worst.max(max_abs_diff(&a, &b));
        }
        let res = if worst <= tol {
            Ok(())
        } else {
            Err(format!("max deviation {worst:e} exceeds {tol:e}"))
        };
        (name, res)
    };
    vec![
        run("hybrid_pool(gamma=1e6) ~ gap", 1e-3, &|m| {
            let cfg = PoolConfig {
                split_sizes: vec![1, 2, 4],
                gamma: 1e6,
            };
            (pooling::hybrid_pool(m.view(), &cfg).unwrap(), pooling::gap(m.view()))
        }),
        run("branch_pool(r=1) == gmp", 0.0, &|m| {
            let gmp = Array1::from(
                (0..m.dim().2)
                    .map(|c| m.slice(ndarray::s![.., .., c]).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect::<Vec<_>>(),
            );
            (pooling::branch_pool(m.view(), 1).unwrap(), gmp)
        }),
        run("lse(s=1e3) ~ gmp", 1e-2, &|m| {
            (pooling::lse(m.view(), 1e3).unwrap(), pooling::branch_pool(m.view(), 1).unwrap())
        }),
        run("gwrp(decay=0.999) ~ gap", 1e-2, &|m| {
            (pooling::gwrp(m.view(), 0.999).unwrap(), pooling::gap(m.view()))
        }),
    ]
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

/// Relative disagreement. Below 1e-5 the denominator is floored, so tiny
/// gradients compare absolutely at 1e-9, about the roundoff level of a
/// central difference with step 1e-6.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central difference of `f` in coordinate `idx` of `x`.
pub fn central_diff(x: &mut [f64], idx: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[idx];
    x[idx] = orig + FD_STEP;
    let up = f(x);
    x[idx] = orig - FD_STEP;
    let down = f(x);
    x[idx] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Compares `analytic` against central differences at `coords` (or every
/// coordinate when `None`). Returns the worst relative error.
pub fn fd_check(
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut buf = x.to_vec();
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut worst: f64 = 0.0;
    for &i in coords {
        let num = central_diff(&mut buf, i, &mut f);
        worst = worst.max(rel_err(analytic[i], num));
    }
    worst
}

pub fn pick(r: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count.min(n)).map(|_| r.random_range(0..n)).collect()
}

fn grad_result(name: &str, instance: usize, worst: f64) -> Check {
    if worst <= FD_TOL {
        Ok(())
    } else {
        Err(format!("{name}: instance {instance} relative error {worst:e}"))
    }
}

pub const GRAD_INSTANCES: usize = 20;

pub fn check_grad_soft_margin(instances: usize) -> Check {
    let mut r = rng(31);
    for t in 0..instances {
        let l = r.random_range(1..7);
        let p: Vec<f64> = (0..l).map(|_| uniform(&mut r, -4.0, 4.0)).collect();
        let y: Vec<u8> = (0..l).map(|_| r.random_range(0..2)).collect();
        let g = losses::soft_margin_grad(Array1::from(p.clone()).view(), &y).unwrap();
        let worst = fd_check(&p, g.as_slice().unwrap(), None, |x| {
            losses::soft_margin_loss(Array1::from(x.to_vec()).view(), &y).unwrap()
        });
        grad_result("soft_margin_loss", t, worst)?;
    }
    Ok(())
}

pub fn check_grad_decov(instances: usize) -> Check {
    let mut r = rng(32);
    for t in 0..instances {
        let (k, d) = (r.random_range(2..7), r.random_range(2..9));
        let c = rand_mat(&mut r, k, d);
        let g = losses::decov_grad(c.view());
        let worst = fd_check(c.as_slice().unwrap(), g.as_slice().unwrap(), None, |x| {
            losses::decov_loss(ndarray::ArrayView2::from_shape((k, d), x).unwrap())
        });
        grad_result("decov_loss", t, worst)?;
    }
    Ok(())
}

/// Pooling gradients via the random readout `Σ v·pool(F)`.
pub fn check_grad_pooling(instances: usize) -> Vec<(&'static str, Check)> {
    let ops: Vec<(&'static str, pooling::Pooling)> = vec![
        ("gap", pooling::Pooling::Gap),
        ("gmp", pooling::Pooling::Gmp),
        ("lse", pooling::Pooling::Lse { sharpness: 3.0 }),
        ("gwrp", pooling::Pooling::Gwrp { decay: 0.7 }),
        ("hybrid", pooling::Pooling::Hybrid(PoolConfig::default())),
    ];
    ops.into_iter()
        .map(|(name, op)| {
            let mut r = rng(33);
            let res = (|| {
                for t in 0..instances {
                    let (h, w, d) = (4 * r.random_range(1..3), 4 * r.random_range(1..3), r.random_range(1..4));
                    let f = rand_map(&mut r, h, w, d);
                    let v = Array1::from_shape_fn(d, |_| r.random_range(-1.0..1.0));
                    let g = op.backward(f.view(), v.view()).unwrap();
                    let worst = fd_check(f.as_slice().unwrap(), g.as_slice().unwrap(), None, |x| {
                        let m = ndarray::ArrayView3::from_shape((h, w, d), x).unwrap();
                        op.forward(m).unwrap().dot(&v)
                    });
                    grad_result(name, t, worst)?;
                }
                Ok(())
            })();
            (name, res)
        })
        .collect()
}

/// `Σ v·f_word(F, C)` differentiated with respect to both F and C.
pub fn check_grad_codebook(instances: usize) -> Check {
    let mut r = rng(34);
    for t in 0..instances {
        let (n, k, d) = (r.random_range(2..10), r.random_range(2..6), r.random_range(2..6));
        let tau = uniform(&mut r, 0.5, 4.0);
        let f = rand_mat(&mut r, n, d);
        let cb = rand_codebook(&mut r, k, d, CodebookMode::Learnable);
        let v = Array1::from_shape_fn(k, |_| r.random_range(-1.0..1.0));
        let wa = codebook::encode(f.view(), &cb, tau).unwrap();
        let d_p = codebook::soft_frequency_backward(&v, n);
        let d_s = codebook::assign_probabilities_backward(&wa.p, &d_p, tau);
        let (d_f, d_c) = codebook::similarity_backward(f.view(), cb.words.view(), &wa.s, &d_s);
        let readout = |fm: &Array2<f64>, c: &Array2<f64>| {
            let cb = Codebook::new(c.clone(), CodebookMode::Learnable).unwrap();
            codebook::encode(fm.view(), &cb, tau).unwrap().f_word.dot(&v)
        };
        let worst_c = fd_check(cb.words.as_slice().unwrap(), d_c.as_slice().unwrap(), None, |x| {
            readout(&f, &Array2::from_shape_vec((k, d), x.to_vec()).unwrap())
        });
        grad_result("f_word wrt codebook", t, worst_c)?;
        let worst_f = fd_check(f.as_slice().unwrap(), d_f.as_slice().unwrap(), None, |x| {
            readout(&Array2::from_shape_vec((n, d), x.to_vec()).unwrap(), &cb.words)
        });
        grad_result("f_word wrt features", t, worst_f)?;

        // similarity alone with a random upstream gradient
        let g_up = rand_mat(&mut r, n, k);
        let (sf, sc) = codebook::similarity_backward(f.view(), cb.words.view(), &wa.s, &g_up);
        let sim = |fm: &Array2<f64>, c: &Array2<f64>| (oracle_similarity(fm, c) * &g_up).sum();
        let w1 = fd_check(f.as_slice().unwrap(), sf.as_slice().unwrap(), None, |x| {
            sim(&Array2::from_shape_vec((n, d), x.to_vec()).unwrap(), &cb.words)
        });
        let w2 = fd_check(cb.words.as_slice().unwrap(), sc.as_slice().unwrap(), None, |x| {
            sim(&f, &Array2::from_shape_vec((k, d), x.to_vec()).unwrap())
        });
        grad_result("similarity", t, w1.max(w2))?;
    }
    Ok(())
}

pub fn tiny_backbone_config() -> vwcam::backbone::BackboneConfig {
    vwcam::backbone::BackboneConfig {
        in_channels: 3,
        widths: vec![4, 6, 8],
        strides: vec![2, 1, 1],
        image_height: 8,
        image_width: 8,
        ..Default::default()
    }
}

/// Train-mode backbone gradients for `Σ R·features` at ≥ 10 random
/// coordinates per parameter tensor, plus the input gradient.
pub fn check_grad_backbone(instances: usize) -> Check {
    use vwcam::backbone::{self, NormMode};
    let cfg = tiny_backbone_config();
    let mut r = rng(35);
    for t in 0..instances {
        let params = backbone::init_backbone(&cfg, t as u64).unwrap();
        let n = 2;
        let images = Array4::from_shape_fn((n, 8, 8, 3), |_| r.random_range(0.0..1.0));
        let (feats, cache) = backbone::forward(&params, images.view(), NormMode::Train).unwrap();
        let readout = Array4::from_shape_fn(feats.raw_dim(), |_| r.random_range(-1.0..1.0));
        let (grads, d_input) = backbone::backward(&params, &cache, &readout, true);
        let score = |p: &backbone::BackboneParams, x: &Array4<f64>| {
            (backbone::forward(p, x.view(), NormMode::Train).unwrap().0 * &readout).sum()
        };
        let flat_grads = grads.slices();
        for (slot, g) in flat_grads.iter().enumerate() {
            let mut probe = params.clone();
            let x0: Vec<f64> = probe.slices_mut()[slot].to_vec();
            let coords = pick(&mut r, x0.len(), 10);
            let worst = fd_check(&x0, g, Some(&coords), |x| {
                probe.slices_mut()[slot].copy_from_slice(x);
                score(&probe, &images)
            });
            grad_result(&format!("backbone param tensor {slot}"), t, worst)?;
        }
        let d_input = d_input.expect("input gradient requested");
        let coords = pick(&mut r, images.len(), 10);
        let worst = fd_check(images.as_slice().unwrap(), d_input.as_slice().unwrap(), Some(&coords), |x| {
            score(&params, &Array4::from_shape_vec(images.raw_dim(), x.to_vec()).unwrap())
        });
        grad_result("backbone input", t, worst)?;
    }
    Ok(())
}

pub fn gradient_checks(instances: usize) -> Vec<(String, Check)> {
    let mut out = vec![
        ("backbone".to_string(), check_grad_backbone(instances)),
        ("codebook".to_string(), check_grad_codebook(instances)),
        ("soft_margin_loss".to_string(), check_grad_soft_margin(instances)),
        ("decov_loss".to_string(), check_grad_decov(instances)),
    ];
    for (name, res) in check_grad_pooling(instances) {
        out.push((format!("pooling/{name}"), res));
    }
    out
}

// ---------------------------------------------------------------------------
// Training-step checks
// ---------------------------------------------------------------------------

pub fn tiny_train_config(strategy: vwcam::training::Strategy) -> vwcam::training::TrainConfig {
    vwcam::training::TrainConfig {
        strategy,
        k: 4,
        backbone_widths: vec![4, 6, 8],
        backbone_strides: vec![2, 1, 1],
        batch_size: 3,
        ..Default::default()
    }
}

pub fn random_batch(r: &mut ChaCha8Rng, n: usize, size: usize, l: usize) -> vwcam::training::Batch {
    vwcam::training::Batch {
        images: Array4::from_shape_fn((n, size, size, 3), |_| r.random_range(0.0..1.0)),
        y_img: (0..n)
            .map(|_| {
                let mut y: Vec<u8> = (0..l).map(|_| r.random_range(0..2)).collect();
                y[r.random_range(0..l)] = 1;
                y
            })
            .collect(),
    }
}

/// Composite training loss gradients for every parameter group against
/// central differences (learning strategy, DeCov on).
pub fn check_grad_train_step(instances: usize) -> Check {
    use vwcam::training::{self, Strategy, TrainState};
    let mut r = rng(36);
    for t in 0..instances {
        let cfg = vwcam::training::TrainConfig {
            seed: t as u64,
            ..tiny_train_config(Strategy::Learning)
        };
        let state = training::init_state(&cfg, 3, (8, 8)).unwrap();
        let batch = random_batch(&mut r, 3, 8, 3);
        let ev = training::evaluate_step(&state, &batch).unwrap();
        let loss_of = |s: &TrainState| training::evaluate_step(s, &batch).unwrap().loss.total;

        let groups: Vec<(&str, Vec<f64>, Vec<f64>, Box<dyn Fn(&mut TrainState) -> &mut [f64]>)> = vec![
            (
                "w_img",
                state.heads.w_img.as_slice().unwrap().to_vec(),
                ev.grads.w_img.as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.heads.w_img.as_slice_mut().unwrap()),
            ),
            (
                "w_word",
                state.heads.w_word.as_slice().unwrap().to_vec(),
                ev.grads.w_word.as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.heads.w_word.as_slice_mut().unwrap()),
            ),
            (
                "w_w2i",
                state.heads.w_w2i.as_ref().unwrap().as_slice().unwrap().to_vec(),
                ev.grads.w_w2i.as_ref().unwrap().as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.heads.w_w2i.as_mut().unwrap().as_slice_mut().unwrap()),
            ),
            (
                "codebook",
                state.codebook.as_ref().unwrap().words.as_slice().unwrap().to_vec(),
                ev.grads.codebook.as_ref().unwrap().as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.codebook.as_mut().unwrap().words.as_slice_mut().unwrap()),
            ),
            (
                "first conv",
                state.backbone.stages[0].weight.as_slice().unwrap().to_vec(),
                ev.grads.backbone.stages[0].weight.as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.backbone.stages[0].weight.as_slice_mut().unwrap()),
            ),
            (
                "last gamma",
                state.backbone.stages[2].gamma.as_slice().unwrap().to_vec(),
                ev.grads.backbone.stages[2].gamma.as_slice().unwrap().to_vec(),
                Box::new(|s: &mut TrainState| s.backbone.stages[2].gamma.as_slice_mut().unwrap()),
            ),
        ];
        for (name, x0, g, access) in groups {
            let coords = pick(&mut r, x0.len(), 10);
            let mut probe = state.clone();
            let worst = fd_check(&x0, &g, Some(&coords), |x| {
                access(&mut probe).copy_from_slice(x);
                loss_of(&probe)
            });
            grad_result(&format!("train step {name}"), t, worst)?;
        }
    }
    Ok(())
}

/// Memory-bank mode: the analytic codebook gradient is identically zero and
/// perturbing a codebook entry leaves the loss bitwise unchanged unless it
/// flips a word-presence label.
pub fn check_detachment(instances: usize) -> Check {
    use vwcam::training::{self, Strategy};
    let mut r = rng(37);
    let mut unchanged_probes = 0;
    for t in 0..instances {
        let cfg = vwcam::training::TrainConfig {
            seed: t as u64,
            ..tiny_train_config(Strategy::MemoryBank)
        };
        let state = training::init_state(&cfg, 3, (8, 8)).unwrap();
        let batch = random_batch(&mut r, 3, 8, 3);
        let ev = training::evaluate_step(&state, &batch).unwrap();
        let g = ev.grads.codebook.as_ref().ok_or("memory-bank step reported no codebook gradient")?;
        if g.iter().any(|&v| v != 0.0) {
            return Err(format!("instance {t}: nonzero codebook gradient"));
        }
        let n = state.codebook.as_ref().unwrap().words.len();
        for idx in pick(&mut r, n, 10) {
            for delta in [1e-6, -1e-6, 1e-3] {
                let mut probe = state.clone();
                probe.codebook.as_mut().unwrap().words.as_slice_mut().unwrap()[idx] += delta;
                let pe = training::evaluate_step(&probe, &batch).unwrap();
                if pe.y_word == ev.y_word {
                    unchanged_probes += 1;
                    if pe.loss.total != ev.loss.total {
                        return Err(format!(
                            "instance {t}: loss moved by {:e} under codebook perturbation with labels fixed",
                            pe.loss.total - ev.loss.total
                        ));
                    }
                }
            }
        }
    }
    if unchanged_probes == 0 {
        return Err("no perturbation kept the word labels fixed".into());
    }
    Ok(())
}
