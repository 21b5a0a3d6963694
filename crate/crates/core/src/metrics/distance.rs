//! Exact Euclidean distance transform with nearest-foreground indices.
//!
//! A column pass finds the nearest foreground row in every column; a row pass
//! then takes the lower envelope of the resulting parabolas. Breakpoints are
//! kept as exact rationals so ties resolve deterministically: among equally
//! near foreground pixels the one with the smallest column wins, then the
//! smallest row (the smallest column-major index).

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    /// Squared distances, row-major.
    pub sq_dist: Vec<u64>,
    /// Row-major index `y * width + x` of the nearest foreground pixel.
    pub nearest: Vec<usize>,
}

impl DistanceMap {
    pub fn distance(&self, y: usize, x: usize) -> f64 {
        (self.sq_dist[y * self.width + x] as f64).sqrt()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.sq_dist.iter().map(|&d| (d as f64).sqrt()).collect()
    }
}

/// Breakpoint `num / den` with `den > 0`, or an infinity.
#[derive(Clone, Copy, Debug)]
enum Bound {
    NegInf,
    At(i128, i128),
    PosInf,
}

impl Bound {
    /// `self < q` for an integer `q`.
    fn lt_int(self, q: i128) -> bool {
        match self {
            Bound::NegInf => true,
            Bound::PosInf => false,
            Bound::At(n, d) => n < q * d,
        }
    }

    /// `self <= other`.
    fn le(self, other: Bound) -> bool {
        match (self, other) {
            (Bound::NegInf, _) | (_, Bound::PosInf) => true,
            (_, Bound::NegInf) | (Bound::PosInf, _) => false,
            (Bound::At(a, b), Bound::At(c, d)) => a * d <= c * b,
        }
    }
}

/// Distance from every pixel to the nearest pixel with value `>= 0.5`.
pub fn distance_transform(mask: &Mask) -> Result<DistanceMap> {
    let (w, h) = (mask.width, mask.height);
    let fg = |y: usize, x: usize| mask.get(y, x) >= 0.5;

    // column pass: nearest foreground row per (y, x), ties to the upper row
    let mut near_row: Vec<Option<usize>> = vec![None; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if fg(y, x) {
                last = Some(y);
            }
            near_row[y * w + x] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if fg(y, x) {
                next = Some(y);
            }
            let above = near_row[y * w + x];
            near_row[y * w + x] = match (above, next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    if near_row.iter().all(Option::is_none) {
        return Err(Error::EmptyForeground);
    }

    let mut sq_dist = vec![0u64; w * h];
    let mut nearest = vec![0usize; w * h];
    let mut v: Vec<usize> = Vec::with_capacity(w);
    let mut z: Vec<Bound> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let g = |x: usize| -> Option<i128> { near_row[y * w + x].map(|r| (r as i128 - y as i128).pow(2)) };
        v.clear();
        z.clear();
        for q in 0..w {
            let Some(gq) = g(q) else { continue };
            let mut bound = Bound::NegInf;
            while let Some(&p) = v.last() {
                let gp = g(p).expect("only finite columns are kept");
                let (qi, pi) = (q as i128, p as i128);
                let s = Bound::At(gq + qi * qi - gp - pi * pi, 2 * (qi - pi));
                if s.le(*z.last().expect("one bound per kept column")) {
                    v.pop();
                    z.pop();
                } else {
                    bound = s;
                    break;
                }
            }
            v.push(q);
            z.push(bound);
        }
        z.push(Bound::PosInf);
        let mut k = 0;
        for q in 0..w {
            while z[k + 1].lt_int(q as i128) {
                k += 1;
            }
            let p = v[k];
            let r = near_row[y * w + p].expect("kept column has foreground");
            let dx = q as i128 - p as i128;
            let dy = y as i128 - r as i128;
            sq_dist[y * w + q] = (dx * dx + dy * dy) as u64;
            nearest[y * w + q] = r * w + p;
        }
    }
    Ok(DistanceMap {
        width: w,
        height: h,
        sq_dist,
        nearest,
    })
}
