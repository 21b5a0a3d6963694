//! Independent reference implementations used as test oracles, plus random
//! instance generators. The oracles favour directness over speed: explicit
//! 2-D kernels, exhaustive nearest-pixel search, per-threshold recounts.

#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use flowseg::dataset::Triplet;
use flowseg::paip::{
    bounding_box, largest_adjacent_rect, mix_pair, mix_with_option, pairable, strip_thickness, MixOption, Side,
};
use flowseg::raster::{Mask, Rect};
use flowseg::rng::stream;
use flowseg::synth::sample_triplet;
use rand::Rng;

pub fn bits(m: &Mask) -> Vec<bool> {
    m.data.iter().map(|&v| v >= 0.5).collect()
}

/// Random prediction: 8-bit levels, arbitrary floats, or exact 0/1 values.
pub fn random_pred<R: Rng>(rng: &mut R, w: usize, h: usize) -> Mask {
    let style = rng.gen_range(0..4);
    let data = (0..w * h)
        .map(|_| match style {
            0 => rng.gen_range(0..=255u8) as f32 / 255.0,
            1 => rng.gen::<f32>(),
            2 => {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => [0.0, 0.2, 0.5, 0.8, 1.0][rng.gen_range(0..5)],
        })
        .collect();
    Mask::new(w, h, data).unwrap()
}

/// Random binary ground truth with a random foreground density.
pub fn random_gt<R: Rng>(rng: &mut R, w: usize, h: usize) -> Mask {
    let p: f64 = rng.gen_range(0.0..=1.0);
    let data = (0..w * h).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    Mask::new(w, h, data).unwrap()
}

pub fn mae(pred: &Mask, gt: &Mask) -> f64 {
    let g = bits(gt);
    let mut s = 0.0;
    for i in 0..g.len() {
        let target = if g[i] { 1.0 } else { 0.0 };
        s += (pred.data[i] as f64 - target).abs();
    }
    s / g.len() as f64
}

/// Max over thresholds of the F-measure, recounting every threshold.
pub fn f_max(pred: &Mask, gt: &Mask, beta_sq: f64) -> f64 {
    let g = bits(gt);
    let mut best: f64 = 0.0;
    for k in 0..256 {
        let t = k as f32 / 255.0;
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..g.len() {
            let on = pred.data[i] > t;
            match (on, g[i]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f = if beta_sq * p + r > 0.0 {
            (1.0 + beta_sq) * p * r / (beta_sq * p + r)
        } else {
            0.0
        };
        best = best.max(f);
    }
    best
}

/// Exhaustive nearest foreground pixel. Candidates are visited column by
/// column, top to bottom, and only a strictly closer one replaces the
/// current best, so ties go to the smallest column, then the smallest row.
pub fn nearest_foreground(mask: &Mask) -> Option<(Vec<u64>, Vec<usize>)> {
    let (w, h) = (mask.width, mask.height);
    let g = bits(mask);
    if !g.iter().any(|&b| b) {
        return None;
    }
    let mut d = vec![0u64; w * h];
    let mut idx = vec![0usize; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = u64::MAX;
            for fx in 0..w {
                for fy in 0..h {
                    if !g[fy * w + fx] {
                        continue;
                    }
                    let dx = fx as i64 - x as i64;
                    let dy = fy as i64 - y as i64;
                    let dd = (dx * dx + dy * dy) as u64;
                    if dd < best {
                        best = dd;
                        idx[y * w + x] = fy * w + fx;
                    }
                }
            }
            d[y * w + x] = best;
        }
    }
    Some((d, idx))
}

/// Normalized 7x7 Gaussian evaluated directly in two dimensions.
fn gaussian_2d(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Weighted F-measure with an explicit 2-D convolution and brute-force
/// nearest-pixel error copying. `None` for empty ground truth.
pub fn f_weighted(pred: &Mask, gt: &Mask) -> Option<f64> {
    let (w, h) = (gt.width, gt.height);
    let g = bits(gt);
    let (sq, idx) = nearest_foreground(gt)?;
    let e: Vec<f64> = (0..w * h)
        .map(|i| (pred.data[i] as f64 - if g[i] { 1.0 } else { 0.0 }).abs())
        .collect();
    let et: Vec<f64> = (0..w * h).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();
    let k = gaussian_2d(7, 5.0);
    let mut ea = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let (yy, xx) = (y + i as i64 - 3, x + j as i64 - 3);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += kv * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = acc;
        }
    }
    let mut min_e = ea.clone();
    for i in 0..w * h {
        if g[i] && ea[i] > e[i] {
            min_e[i] = e[i];
        }
    }
    let mut tpw = g.iter().filter(|&&b| b).count() as f64;
    let mut fpw = 0.0;
    for i in 0..w * h {
        if g[i] {
            tpw -= min_e[i];
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * (sq[i] as f64).sqrt()).exp();
            fpw += e[i] * b;
        }
    }
    let n_gt = g.iter().filter(|&&b| b).count() as f64;
    let p = if tpw + fpw != 0.0 { tpw / (tpw + fpw) } else { 0.0 };
    let r = tpw / n_gt;
    let f = if p + r != 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Some(f.clamp(0.0, 1.0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_unbiased(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (v.len() as f64 - 1.0)).sqrt()
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        a += (p[i] - x) * (p[i] - x);
        b += (g[i] - y) * (g[i] - y);
        c += (p[i] - x) * (g[i] - y);
    }
    let (sx, sy, sxy) = if p.len() > 1 {
        (a / (n - 1.0), b / (n - 1.0), c / (n - 1.0))
    } else {
        (0.0, 0.0, 0.0)
    };
    let num = 4.0 * x * y * sxy;
    let den = (x * x + y * y) * (sx + sy);
    if num != 0.0 {
        num / den
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure transcribed from the object/region definitions.
pub fn s_measure(pred: &Mask, gt: &Mask, alpha: f64) -> f64 {
    let (w, h) = (gt.width, gt.height);
    let g = bits(gt);
    let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let n = (w * h) as f64;
    let fg_count = g.iter().filter(|&&b| b).count();
    if fg_count == 0 {
        return (1.0 - mean(&p)).clamp(0.0, 1.0);
    }
    if fg_count == w * h {
        return mean(&p).clamp(0.0, 1.0);
    }
    let o = |vals: Vec<f64>| {
        let x = mean(&vals);
        2.0 * x / (x * x + 1.0 + 2.0 * std_unbiased(&vals))
    };
    let o_fg = o((0..w * h).filter(|&i| g[i]).map(|i| p[i]).collect());
    let o_bg = o((0..w * h).filter(|&i| !g[i]).map(|i| 1.0 - p[i]).collect());
    let u = fg_count as f64 / n;
    let object = u * o_fg + (1.0 - u) * o_bg;

    // centroid, 1-based and rounded half away from zero
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sx += x as f64 + 1.0;
                sy += y as f64 + 1.0;
            }
        }
    }
    let cx = (sx / fg_count as f64).round() as usize;
    let cy = (sy / fg_count as f64).round() as usize;
    let mut region = 0.0;
    let quads = [(0, cx, 0, cy), (cx, w, 0, cy), (0, cx, cy, h), (cx, w, cy, h)];
    for (x0, x1, y0, y1) in quads {
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let (mut pq, mut gq) = (Vec::new(), Vec::new());
        for y in y0..y1 {
            for x in x0..x1 {
                pq.push(p[y * w + x]);
                gq.push(if g[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        let weight = ((x1 - x0) * (y1 - y0)) as f64 / n;
        region += weight * ssim(&pq, &gq);
    }
    (alpha * object + (1.0 - alpha) * region).clamp(0.0, 1.0)
}

/// Mean enhanced-alignment score over the 256 thresholds.
pub fn e_mean(pred: &Mask, gt: &Mask) -> f64 {
    let g = bits(gt);
    let n = g.len() as f64;
    let n_fg = g.iter().filter(|&&b| b).count();
    let mut total = 0.0;
    for k in 0..256 {
        let t = k as f32 / 255.0;
        let fm: Vec<f64> = pred.data.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
        let score = if n_fg == 0 {
            1.0 - mean(&fm)
        } else if n_fg == g.len() {
            mean(&fm)
        } else {
            let gv: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let (mf, mg) = (mean(&fm), mean(&gv));
            let mut s = 0.0;
            for i in 0..g.len() {
                let (a, b) = (fm[i] - mf, gv[i] - mg);
                let align = 2.0 * a * b / (a * a + b * b);
                s += (1.0 + align).powi(2) / 4.0;
            }
            s / n
        };
        total += score;
    }
    total / 256.0
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn pairable_samples(seed: u64, size: usize) -> (Triplet, Triplet) {
    for k in 0.. {
        let mut rng = stream(seed, 7, k);
        let a = sample_triplet(&mut rng, size, size, 1, 0.3).unwrap().triplet;
        let b = sample_triplet(&mut rng, size, size, 1, 0.3).unwrap().triplet;
        if pairable(&a, &b) {
            return (a, b);
        }
    }
    unreachable!()
}

/// Largest area of any rectangle inside a `w x h` image that avoids `bbox`,
/// by enumerating every rectangle.
pub fn brute_force_max_area(w: usize, h: usize, bbox: &Rect) -> usize {
    let mut best = 0;
    for x0 in 0..w {
        for x1 in x0 + 1..=w {
            for y0 in 0..h {
                for y1 in y0 + 1..=h {
                    let r = Rect::new(x0, y0, x1 - x0, y1 - y0);
                    if !r.intersects(bbox) {
                        best = best.max(r.area());
                    }
                }
            }
        }
    }
    best
}

/// Geometric and algebraic invariants of one seeded pairing.
pub fn check_paip_instance(seed: u64) -> Result<(), String> {
    let size = [24, 32, 40][(seed % 3) as usize];
    let (a, b) = pairable_samples(seed, size);
    let m1 = mix_pair(&a, &b, true, &mut stream(seed, 1, 0)).map_err(|e| e.to_string())?;
    let m2 = mix_pair(&a, &b, true, &mut stream(seed, 1, 0)).map_err(|e| e.to_string())?;
    ensure!(m1.triplet == m2.triplet && m1.placed == m2.placed, "seed {seed}: mixing not reproducible");

    let bbox = bounding_box(&a.mask).map_err(|e| e.to_string())?;
    let (strip, side) = largest_adjacent_rect(size, size, &bbox).map_err(|e| e.to_string())?;
    let t = strip_thickness(&strip, side);
    ensure!(!strip.intersects(&bbox), "seed {seed}: strip overlaps the bbox");
    let (thick, full, padded) = match side {
        Side::Left | Side::Right => (m1.region.w, m1.region.h, (size + t, size)),
        Side::Top | Side::Bottom => (m1.region.h, m1.region.w, (size, size + t)),
    };
    ensure!(thick == 2 * t && full == size, "seed {seed}: region {:?} is not the doubled strip", m1.region);
    ensure!(m1.padded == padded, "seed {seed}: padded canvas {:?}", m1.padded);
    ensure!(m1.region.contains_rect(&m1.placed), "seed {seed}: placement leaves the region");

    let overlap = m1
        .ref_mask
        .data
        .iter()
        .zip(&m1.pair_mask.data)
        .filter(|(&r, &p)| r >= 0.5 && p >= 0.5)
        .count();
    ensure!(overlap == 0, "seed {seed}: {overlap} overlapping foreground pixels");

    let mix = |opt| mix_with_option(&m1.ref_mask, &m1.pair_mask, a.prompt, b.prompt, opt).map_err(|e| e.to_string());
    let (minus, _, _) = mix(MixOption::RefMinusPair)?;
    let (pair, _, _) = mix(MixOption::Pair)?;
    let (union, up, _) = mix(MixOption::Union)?;
    let identity = (0..union.data.len()).all(|i| minus.data[i].max(pair.data[i]) == union.data[i]);
    ensure!(identity, "seed {seed}: (A and not B) or B differs from A or B");
    ensure!(Some(up) == a.prompt.union(b.prompt), "seed {seed}: union prompt");

    let fg = bounding_box(&b.mask).map_err(|e| e.to_string())?;
    let (fw, fh) = (fg.w as f64, fg.h as f64);
    let (nw, nh) = (m1.placed.w as f64, m1.placed.h as f64);
    let slack = if fh <= fw { (nh - fh * nw / fw).abs() } else { (nw - fw * nh / fh).abs() };
    ensure!(slack <= 1.0, "seed {seed}: aspect slack {slack}");

    let m = &m1.triplet.mask;
    ensure!((m.width, m.height) == (size, size) && m.is_binary(), "seed {seed}: stored mask");
    Ok(())
}
