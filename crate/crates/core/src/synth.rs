//! Synthetic shape scenes: anti-aliased rendering, per-shape masks and the
//! on-disk dataset layout.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_rows, Manifest, ManifestRow, Triplet};
use crate::error::{Error, Result};
use crate::prompt::{PromptId, ShapeKind};
use crate::raster::{Image, Mask};
use crate::rng::stream;

/// Supersampling grid per pixel axis.
const SUBSAMPLES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub radius: f64,
    pub rotation: f64,
    /// Per-channel fill (only the first entry is used for grayscale).
    pub fill: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat { level: [f32; 3] },
    Gradient { from: [f32; 3], to: [f32; 3], angle: f64 },
    Noise { level: [f32; 3], amplitude: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    /// Drives the background noise.
    pub seed: u64,
}

impl ShapeSpec {
    /// Whether the point `(x, y)` (pixel units, continuous) lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = (-self.rotation).sin_cos();
        let (u, v) = (dx * c - dy * s, dx * s + dy * c);
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => u * u + v * v <= r * r,
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            ShapeKind::Square => {
                let a = r / 2f64.sqrt();
                u.abs() <= a && v.abs() <= a
            }
            ShapeKind::Triangle => {
                let pts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let th = -PI / 2.0 + k as f64 * TAU / 3.0;
                        (r * th.cos(), r * th.sin())
                    })
                    .collect();
                in_polygon(&pts, u, v)
            }
            ShapeKind::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|k| {
                        let th = -PI / 2.0 + k as f64 * PI / 5.0;
                        let rr = if k % 2 == 0 { r } else { 0.45 * r };
                        (rr * th.cos(), rr * th.sin())
                    })
                    .collect();
                in_polygon(&pts, u, v)
            }
        }
    }
}

/// Even-odd rule.
fn in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !matches!(self.channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "scene must be non-empty with 1 or 3 channels, got {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        if self.shapes.is_empty() || self.shapes.len() > 2 {
            return Err(Error::InvalidArgument(format!("scene needs 1 or 2 shapes, got {}", self.shapes.len())));
        }
        if self.shapes.len() == 2 && self.shapes[0].kind == self.shapes[1].kind {
            return Err(Error::InvalidArgument("two-shape scenes need distinct kinds".into()));
        }
        for s in &self.shapes {
            let r = s.radius;
            if !(r > 0.0) || s.cx - r < 0.0 || s.cy - r < 0.0 || s.cx + r > self.width as f64 || s.cy + r > self.height as f64 {
                return Err(Error::InvalidArgument(format!(
                    "{} at ({:.1}, {:.1}) radius {r:.1} leaves the {}x{} canvas",
                    s.kind.word(),
                    s.cx,
                    s.cy,
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }

    fn background_at(&self, x: usize, y: usize, c: usize, noise: f32) -> f32 {
        match &self.background {
            Background::Flat { level } => level[c],
            Background::Gradient { from, to, angle } => {
                let (s, co) = angle.sin_cos();
                let (w, h) = (self.width as f64, self.height as f64);
                let u = ((x as f64 + 0.5 - w / 2.0) * co + (y as f64 + 0.5 - h / 2.0) * s) / w.max(h) + 0.5;
                let u = u.clamp(0.0, 1.0) as f32;
                from[c] + (to[c] - from[c]) * u
            }
            Background::Noise { level, amplitude } => level[c] + amplitude * noise,
        }
    }
}

/// Rasterizes `spec`; returns the image and one binary mask per shape
/// (pixels with at least half coverage).
pub fn render_scene(spec: &SceneSpec) -> Result<(Image, Vec<Mask>)> {
    spec.validate()?;
    let (w, h, ch) = (spec.width, spec.height, spec.channels);
    let mut rng = stream(spec.seed, 0x5CE7E, 0);
    let noise: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut img = Image::filled(w, h, ch, 0.0);
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                img.set(c, y, x, spec.background_at(x, y, c, noise[y * w + x]));
            }
        }
    }
    let total = (SUBSAMPLES * SUBSAMPLES) as f32;
    let mut masks = Vec::with_capacity(spec.shapes.len());
    for s in &spec.shapes {
        let mut m = Mask::zeros(w, h);
        let x_lo = (s.cx - s.radius).floor().max(0.0) as usize;
        let x_hi = ((s.cx + s.radius).ceil() as usize).min(w);
        let y_lo = (s.cy - s.radius).floor().max(0.0) as usize;
        let y_hi = ((s.cy + s.radius).ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let px = x as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
                        if s.contains(px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f32 / total;
                for c in 0..ch {
                    let v = img.get(c, y, x);
                    img.set(c, y, x, v * (1.0 - cov) + s.fill[c] * cov);
                }
                if cov >= 0.5 {
                    m.set(y, x, 1.0);
                }
            }
        }
        masks.push(m);
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((img, masks))
}

/// A fill level at least `gap` away from `bg` (in `[0, 1]`).
fn contrasting<R: Rng>(rng: &mut R, bg: f32, gap: f32) -> f32 {
    let below = (bg - gap).max(0.0);
    let above = (1.0 - (bg + gap)).max(0.0);
    let u = rng.gen_range(0.0..below + above);
    if u < below {
        u
    } else {
        bg + gap + (u - below)
    }
}

/// Random scene with one or two shapes of distinct kinds.
pub fn sample_scene<R: Rng>(rng: &mut R, width: usize, height: usize, channels: usize, two_shapes: bool) -> SceneSpec {
    let side = width.min(height) as f64;
    let mut kinds = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(if two_shapes { 2 } else { 1 });

    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15f32..0.85));
    let background = match rng.gen_range(0..3) {
        0 => Background::Flat { level: bg },
        1 => Background::Gradient {
            from: bg.map(|v| (v - 0.1).max(0.0)),
            to: bg.map(|v| (v + 0.1).min(1.0)),
            angle: rng.gen_range(0.0..TAU),
        },
        _ => Background::Noise {
            level: bg,
            amplitude: 0.06,
        },
    };
    let (r_lo, r_hi) = if two_shapes { (0.10, 0.20) } else { (0.12, 0.28) };

    let mut shapes: Vec<ShapeSpec> = Vec::new();
    for kind in kinds {
        let mut radius = rng.gen_range(r_lo..r_hi) * side;
        let mut attempt = 0;
        let (cx, cy) = loop {
            let cx = rng.gen_range(radius..=width as f64 - radius);
            let cy = rng.gen_range(radius..=height as f64 - radius);
            let clear = shapes
                .iter()
                .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() >= o.radius + radius + 2.0);
            if clear {
                break (cx, cy);
            }
            attempt += 1;
            if attempt % 50 == 0 {
                radius = (radius * 0.85).max(2.0);
            }
        };
        let fill: [f32; 3] = std::array::from_fn(|c| contrasting(rng, bg[c], 0.35));
        shapes.push(ShapeSpec {
            kind,
            cx,
            cy,
            radius,
            rotation: rng.gen_range(0.0..TAU),
            fill,
        });
    }
    SceneSpec {
        width,
        height,
        channels,
        shapes,
        background,
        seed: rng.gen(),
    }
}

/// A rendered scene together with the mask and prompt chosen for it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: SceneSpec,
    pub triplet: Triplet,
    pub shape_masks: Vec<Mask>,
}

/// Renders a random scene and picks its target: the single shape, or for two
/// shapes uniformly one of the shapes or their union.
pub fn sample_triplet<R: Rng>(rng: &mut R, width: usize, height: usize, channels: usize, two_shape_fraction: f64) -> Result<Sample> {
    let two = rng.gen_bool(two_shape_fraction.clamp(0.0, 1.0));
    let spec = sample_scene(rng, width, height, channels, two);
    let (image, masks) = render_scene(&spec)?;
    let kinds: Vec<ShapeKind> = spec.shapes.iter().map(|s| s.kind).collect();
    let (mask, prompt) = if kinds.len() == 1 {
        (masks[0].clone(), PromptId::shape(kinds[0]))
    } else {
        match rng.gen_range(0..3) {
            0 => (masks[0].clone(), PromptId::shape(kinds[0])),
            1 => (masks[1].clone(), PromptId::shape(kinds[1])),
            _ => {
                let mut u = masks[0].clone();
                for (a, &b) in u.data.iter_mut().zip(&masks[1].data) {
                    *a = a.max(b);
                }
                (u, PromptId::from_words(&kinds).expect("two words"))
            }
        }
    };
    Ok(Sample {
        spec,
        triplet: Triplet {
            image,
            mask,
            prompt,
            scene: kinds,
        },
        shape_masks: masks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub resolution: usize,
    pub channels: usize,
    pub two_shape_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            resolution: 64,
            channels: 1,
            two_shape_fraction: 0.3,
            seed: 0,
        }
    }
}

pub const SPLITS: [&str; 2] = ["train", "val"];

/// Writes `out_dir/{train,val}/{images,masks}/NNNNNN.png` and
/// `out_dir/manifest.jsonl`. Each split draws from its own seed partition.
pub fn make_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (split_idx, (split, n)) in SPLITS.iter().zip([cfg.n_train, cfg.n_val]).enumerate() {
        if n == 0 {
            continue;
        }
        for sub in ["images", "masks"] {
            let d = out_dir.join(split).join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for i in 0..n {
            let mut rng = stream(cfg.seed, split_idx as u64, i as u64);
            let s = sample_triplet(&mut rng, cfg.resolution, cfg.resolution, cfg.channels, cfg.two_shape_fraction)?;
            let image = format!("{split}/images/{i:06}.png");
            let mask = format!("{split}/masks/{i:06}.png");
            s.triplet.image.save(&out_dir.join(&image))?;
            s.triplet.mask.save(&out_dir.join(&mask))?;
            rows.push(ManifestRow {
                image,
                mask,
                prompt_id: s.triplet.prompt.0,
                prompt_text: s.triplet.prompt.text(),
                split: split.to_string(),
                scene: Some(s.spec.shapes.iter().map(|sh| sh.kind).collect()),
                option: None,
            });
        }
    }
    let path = out_dir.join("manifest.jsonl");
    write_rows(&path, &rows)?;
    Ok(Manifest { path, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(r: f64) -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 48,
            channels: 1,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Circle,
                cx: 24.5,
                cy: 24.5,
                radius: r,
                rotation: 0.0,
                fill: [0.9; 3],
            }],
            background: Background::Flat { level: [0.1; 3] },
            seed: 4,
        }
    }

    #[test]
    fn circle_area() {
        for r in [8.0, 9.0, 11.5, 16.0, 20.0] {
            let (_, m) = render_scene(&circle(r)).unwrap();
            let n = m[0].foreground_count() as f64;
            let expect = PI * r * r;
            assert!((n - expect).abs() / expect < 0.03, "r={r}: {n} vs {expect}");
        }
    }

    #[test]
    fn masks_independent_of_contrast() {
        let mut spec = circle(10.0);
        let (_, m) = render_scene(&spec).unwrap();
        spec.background = Background::Flat { level: [0.9; 3] };
        let (img, m2) = render_scene(&spec).unwrap();
        assert!(img.data.iter().all(|&v| (v - 0.9).abs() < 1e-6));
        assert_eq!(m, m2);
    }

    #[test]
    fn out_of_canvas_rejected() {
        let mut spec = circle(10.0);
        spec.shapes[0].cx = 5.0;
        assert!(render_scene(&spec).is_err());
        let mut spec = circle(5.0);
        let mut second = spec.shapes[0].clone();
        second.cx = 10.0;
        spec.shapes.push(second);
        assert!(render_scene(&spec).is_err(), "duplicate kinds");
    }

    #[test]
    fn all_kinds_render_nonempty_and_disjoint() {
        for seed in 0..40 {
            let mut rng = stream(9, 0, seed);
            let spec = sample_scene(&mut rng, 64, 64, 1, true);
            let (img, masks) = render_scene(&spec).unwrap();
            assert!(img.in_unit_range());
            assert!(masks.iter().all(|m| m.foreground_count() > 10));
            assert!(masks[0].data.iter().zip(&masks[1].data).all(|(a, b)| a * b == 0.0));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = stream(1, 0, 0);
        let spec = sample_scene(&mut rng, 32, 32, 3, false);
        assert_eq!(render_scene(&spec).unwrap().0, render_scene(&spec).unwrap().0);
    }
}
