//! Segmentation quality measures: MAE, max F-measure, weighted F-measure,
//! structure measure and mean enhanced-alignment measure.
//!
//! Predictions are soft maps in `[0, 1]`; ground truth pixels count as
//! foreground when `>= 0.5`. Binarization marks pixels strictly above
//! `k / 255` for `k = 0..=255`, compared in `f32`, the precision masks are
//! stored in, so 8-bit predictions hit every threshold exactly. The strict
//! comparison keeps an all-zero prediction empty at every threshold. Zero
//! denominators resolve to their limits instead of being padded with a small
//! constant, which keeps perfect predictions at exactly 1.

pub mod distance;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::raster::Mask;

pub use distance::{distance_transform, DistanceMap};

pub const NUM_THRESHOLDS: usize = 256;
/// Precision weight of the max F-measure.
pub const FMAX_BETA_SQ: f64 = 0.3;
pub const GAUSS_SIZE: usize = 7;
pub const GAUSS_SIGMA: f64 = 5.0;
pub const S_ALPHA: f64 = 0.5;
/// Weight of the dispersion term in the object similarity.
pub const S_LAMBDA: f64 = 1.0;

pub fn threshold(k: usize) -> f32 {
    k as f32 / 255.0
}

fn check(op: &'static str, pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::shape(op, &[pred.height, pred.width], &[gt.height, gt.width]));
    }
    Ok(())
}

fn gt_bits(gt: &Mask) -> Vec<bool> {
    gt.data.iter().map(|&v| v >= 0.5).collect()
}

pub fn mae(pred: &Mask, gt: &Mask) -> Result<f64> {
    check("mae", pred, gt)?;
    let s: f64 = pred
        .data
        .iter()
        .zip(gt_bits(gt))
        .map(|(&p, g)| (p as f64 - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(s / pred.data.len() as f64)
}

/// F-measure at each of the 256 thresholds.
pub fn f_curve(pred: &Mask, gt: &Mask, beta_sq: f64) -> Result<Vec<f64>> {
    check("f_measure", pred, gt)?;
    let g = gt_bits(gt);
    let n_gt = g.iter().filter(|&&b| b).count() as f64;
    // histogram by the highest threshold each pixel clears
    let mut hist_fg = [0u64; NUM_THRESHOLDS];
    let mut hist_all = [0u64; NUM_THRESHOLDS];
    for (&p, &is_fg) in pred.data.iter().zip(&g) {
        let Some(k) = highest_exceeded(p) else { continue };
        hist_all[k] += 1;
        if is_fg {
            hist_fg[k] += 1;
        }
    }
    let mut out = vec![0.0; NUM_THRESHOLDS];
    let (mut tp, mut pos) = (0u64, 0u64);
    for k in (0..NUM_THRESHOLDS).rev() {
        tp += hist_fg[k];
        pos += hist_all[k];
        let precision = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
        let recall = if n_gt == 0.0 { 0.0 } else { tp as f64 / n_gt };
        let den = beta_sq * precision + recall;
        out[k] = if den == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * precision * recall / den
        };
    }
    Ok(out)
}

/// Largest `k` with `p > k / 255`, if any.
fn highest_exceeded(p: f32) -> Option<usize> {
    if !(p > 0.0) {
        return None;
    }
    let mut k = ((p * 255.0).floor() as usize).min(NUM_THRESHOLDS - 1);
    while k + 1 < NUM_THRESHOLDS && p > threshold(k + 1) {
        k += 1;
    }
    while k > 0 && p <= threshold(k) {
        k -= 1;
    }
    Some(k)
}

pub fn f_max(pred: &Mask, gt: &Mask, beta_sq: f64) -> Result<f64> {
    Ok(f_curve(pred, gt, beta_sq)?.into_iter().fold(0.0, f64::max))
}

/// Normalized `size x size` Gaussian as a 1-D factor (the 2-D kernel is its
/// outer product).
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Same-size correlation with a separable kernel and zero padding.
pub fn filter_separable(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weighted F-measure (beta^2 = 1). Background errors are replaced by the
/// error at the nearest foreground pixel and smoothed; foreground pixels keep
/// the smaller of raw and smoothed error, background pixels keep raw error
/// scaled by a distance-dependent importance.
pub fn f_weighted(pred: &Mask, gt: &Mask) -> Result<f64> {
    check("f_weighted", pred, gt)?;
    let g = gt_bits(gt);
    let n_gt = g.iter().filter(|&&b| b).count();
    if n_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let (w, h) = (gt.width, gt.height);
    let dt = distance_transform(&gt.binarize(0.5))?;
    let err: Vec<f64> = pred
        .data
        .iter()
        .zip(&g)
        .map(|(&p, &b)| (p as f64 - if b { 1.0 } else { 0.0 }).abs())
        .collect();
    let copied: Vec<f64> = (0..w * h).map(|i| if g[i] { err[i] } else { err[dt.nearest[i]] }).collect();
    let smooth = filter_separable(&copied, w, h, &gaussian_1d(GAUSS_SIZE, GAUSS_SIGMA));
    let decay = 0.5f64.ln() / 5.0;
    let (mut fg_err, mut bg_err) = (0.0, 0.0);
    for i in 0..w * h {
        if g[i] {
            fg_err += if smooth[i] < err[i] { smooth[i] } else { err[i] };
        } else {
            let importance = 2.0 - (decay * (dt.sq_dist[i] as f64).sqrt()).exp();
            bg_err += err[i] * importance;
        }
    }
    let tp = n_gt as f64 - fg_err;
    let precision = if tp + bg_err == 0.0 { 0.0 } else { tp / (tp + bg_err) };
    let recall = tp / n_gt as f64;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(f.clamp(0.0, 1.0))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero below two samples.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    let x = mean(values);
    let sigma = sample_std(values);
    2.0 * x / (x * x + 1.0 + 2.0 * S_LAMBDA * sigma)
}

/// MATLAB-style rounding: halves away from zero.
fn round_half_away(v: f64) -> usize {
    v.round() as usize
}

/// One-based centroid column and row of the foreground, rounded.
fn centroid(g: &[bool], w: usize, h: usize) -> (usize, usize) {
    let total = g.iter().filter(|&&b| b).count();
    if total == 0 {
        return (round_half_away(w as f64 / 2.0), round_half_away(h as f64 / 2.0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (round_half_away(sx / total as f64), round_half_away(sy / total as f64))
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    let (x, y) = (mean(p), mean(g));
    let denom = if n < 2 { f64::INFINITY } else { (n - 1) as f64 };
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        sxx += (a - x) * (a - x);
        syy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `alpha * object + (1 - alpha) * region`.
pub fn s_measure(pred: &Mask, gt: &Mask, alpha: f64) -> Result<f64> {
    check("s_measure", pred, gt)?;
    let g = gt_bits(gt);
    let (w, h) = (gt.width, gt.height);
    let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let n_fg = g.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return Ok((1.0 - mean(&p)).clamp(0.0, 1.0));
    }
    if n_fg == g.len() {
        return Ok(mean(&p).clamp(0.0, 1.0));
    }

    let fg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    let bg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &b)| !b).map(|(&v, _)| 1.0 - v).collect();
    let (o_fg, o_bg) = (object_score(&fg_vals), object_score(&bg_vals));
    let u = n_fg as f64 / g.len() as f64;
    let object = o_bg + u * (o_fg - o_bg);

    let (cx, cy) = centroid(&g, w, h);
    let gf: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut region = 0.0;
    for (xs, ys) in [(0..cx, 0..cy), (cx..w, 0..cy), (0..cx, cy..h), (cx..w, cy..h)] {
        let area = xs.len() * ys.len();
        if area == 0 {
            continue;
        }
        let mut pq = Vec::with_capacity(area);
        let mut gq = Vec::with_capacity(area);
        for y in ys.clone() {
            for x in xs.clone() {
                pq.push(p[y * w + x]);
                gq.push(gf[y * w + x]);
            }
        }
        region += area as f64 * ssim_block(&pq, &gq);
    }
    region /= (w * h) as f64;
    Ok((alpha * object + (1.0 - alpha) * region).clamp(0.0, 1.0))
}

/// Enhanced-alignment score of a binary prediction.
pub fn e_measure_binary(bin: &[bool], g: &[bool]) -> f64 {
    let n = g.len() as f64;
    let n_fg = g.iter().filter(|&&b| b).count();
    let pm = bin.iter().filter(|&&b| b).count() as f64 / n;
    if n_fg == 0 {
        return 1.0 - pm;
    }
    if n_fg == g.len() {
        return pm;
    }
    let gm = n_fg as f64 / n;
    let mut acc = 0.0;
    for (&b, &t) in bin.iter().zip(g) {
        let fp = if b { 1.0 } else { 0.0 } - pm;
        let fg = if t { 1.0 } else { 0.0 } - gm;
        let xi = 2.0 * (fg * fp) / (fg * fg + fp * fp);
        acc += (xi + 1.0) * (xi + 1.0) / 4.0;
    }
    acc / n
}

/// E-measure at each of the 256 thresholds.
pub fn e_curve(pred: &Mask, gt: &Mask) -> Result<Vec<f64>> {
    check("e_measure", pred, gt)?;
    let g = gt_bits(gt);
    Ok((0..NUM_THRESHOLDS)
        .map(|k| {
            let t = threshold(k);
            let bin: Vec<bool> = pred.data.iter().map(|&p| p > t).collect();
            e_measure_binary(&bin, &g)
        })
        .collect())
}

pub fn e_measure_mean(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(mean(&e_curve(pred, gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub prompt_id: usize,
    pub mae: f64,
    pub f_max: f64,
    /// Undefined (null) for empty ground truth.
    pub f_weighted: Option<f64>,
    pub s_measure: f64,
    pub e_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub f_max: f64,
    pub f_weighted: f64,
    pub s_measure: f64,
    pub e_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: MetricMeans,
    pub count: usize,
    /// Images contributing to the weighted F-measure mean.
    pub f_weighted_count: usize,
    pub config: BTreeMap<String, serde_json::Value>,
}

/// All five measures for one image (prediction resized to the ground truth).
pub fn score_image(pred: &Mask, gt: &Mask) -> Result<(f64, f64, Option<f64>, f64, f64)> {
    let pred = if (pred.width, pred.height) != (gt.width, gt.height) {
        let mut p = pred.resize(gt.width, gt.height);
        p.clip_unit();
        p
    } else {
        pred.clone()
    };
    let fw = match f_weighted(&pred, gt) {
        Ok(v) => Some(v),
        Err(Error::EmptyGroundTruth) => None,
        Err(e) => return Err(e),
    };
    Ok((
        mae(&pred, gt)?,
        f_max(&pred, gt, FMAX_BETA_SQ)?,
        fw,
        s_measure(&pred, gt, S_ALPHA)?,
        e_measure_mean(&pred, gt)?,
    ))
}

pub fn aggregate(per_image: Vec<ImageMetrics>, config: BTreeMap<String, serde_json::Value>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let n = per_image.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let fw: Vec<f64> = per_image.iter().filter_map(|m| m.f_weighted).collect();
    let mean = MetricMeans {
        mae: avg(|m| m.mae),
        f_max: avg(|m| m.f_max),
        f_weighted: if fw.is_empty() { 0.0 } else { fw.iter().sum::<f64>() / fw.len() as f64 },
        s_measure: avg(|m| m.s_measure),
        e_mean: avg(|m| m.e_mean),
    };
    Ok(MetricsReport {
        count: per_image.len(),
        f_weighted_count: fw.len(),
        per_image,
        mean,
        config,
    })
}

/// Where the prediction for a manifest image lives: the image's relative
/// path mirrored under `pred_dir`.
pub fn prediction_path(pred_dir: &Path, image_rel: &str) -> PathBuf {
    pred_dir.join(image_rel)
}

/// Scores every row of `split` (all rows when `None`) against predictions in `pred_dir`.
pub fn evaluate_dataset(pred_dir: &Path, manifest: &Manifest, split: Option<&str>) -> Result<MetricsReport> {
    let rows: Vec<_> = manifest
        .rows
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest {} has no rows to evaluate",
            manifest.path.display()
        )));
    }
    let missing: Vec<PathBuf> = rows
        .iter()
        .map(|r| prediction_path(pred_dir, &r.image))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut per_image = Vec::with_capacity(rows.len());
    for r in rows {
        let gt = Mask::load(&manifest.resolve(&r.mask))?.binarize(0.5);
        let pred = Mask::load(&prediction_path(pred_dir, &r.image))?;
        let (mae, f_max, f_weighted, s_measure, e_mean) = score_image(&pred, &gt)?;
        per_image.push(ImageMetrics {
            image: r.image.clone(),
            prompt_id: r.prompt_id,
            mae,
            f_max,
            f_weighted,
            s_measure,
            e_mean,
        });
    }
    let mut config = BTreeMap::new();
    config.insert("pred_dir".into(), serde_json::json!(pred_dir));
    config.insert("manifest".into(), serde_json::json!(manifest.path));
    config.insert("split".into(), serde_json::json!(split));
    config.insert("f_max_beta_sq".into(), serde_json::json!(FMAX_BETA_SQ));
    config.insert("f_weighted_beta_sq".into(), serde_json::json!(1.0));
    config.insert("gaussian".into(), serde_json::json!({"size": GAUSS_SIZE, "sigma": GAUSS_SIGMA}));
    config.insert("s_alpha".into(), serde_json::json!(S_ALPHA));
    config.insert("s_lambda".into(), serde_json::json!(S_LAMBDA));
    config.insert("thresholds".into(), serde_json::json!(NUM_THRESHOLDS));
    aggregate(per_image, config)
}
