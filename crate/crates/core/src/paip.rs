//! Position-aware instance pairing: paste a second sample's foreground beside
//! the reference foreground and derive a consistent (mask, prompt) target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Triplet;
use crate::error::{Error, Result};
use crate::prompt::{PromptId, ShapeKind};
use crate::raster::{Image, Mask, Rect};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MixOption {
    /// Reference mask minus the pasted one, reference prompt.
    RefMinusPair,
    /// Pasted mask, pasted prompt.
    Pair,
    /// Union of both, composite prompt.
    Union,
}

impl MixOption {
    pub const ALL: [MixOption; 3] = [MixOption::RefMinusPair, MixOption::Pair, MixOption::Union];

    pub fn label(self) -> &'static str {
        match self {
            MixOption::RefMinusPair => "REF_MINUS_PAIR",
            MixOption::Pair => "PAIR",
            MixOption::Union => "UNION",
        }
    }
}

/// Tightest rectangle around pixels with value `>= 0.5`.
pub fn bounding_box(mask: &Mask) -> Result<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) >= 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyForeground);
    }
    Ok(Rect::new(x0, y0, x1 - x0, y1 - y0))
}

/// The four full-extent strips beside `bbox`, in tie-break order.
pub fn candidate_strips(width: usize, height: usize, bbox: &Rect) -> [(Rect, Side); 4] {
    [
        (Rect::new(0, 0, bbox.x0, height), Side::Left),
        (Rect::new(bbox.x1(), 0, width.saturating_sub(bbox.x1()), height), Side::Right),
        (Rect::new(0, 0, width, bbox.y0), Side::Top),
        (Rect::new(0, bbox.y1(), width, height.saturating_sub(bbox.y1())), Side::Bottom),
    ]
}

/// Largest non-empty strip; ties go to the earlier of left, right, top, bottom.
pub fn largest_adjacent_rect(width: usize, height: usize, bbox: &Rect) -> Result<(Rect, Side)> {
    if bbox.is_empty() || !bbox.fits_in(width, height) {
        return Err(Error::InvalidArgument(format!("bounding box {bbox:?} outside {width}x{height} image")));
    }
    let mut best: Option<(Rect, Side)> = None;
    for (r, side) in candidate_strips(width, height, bbox) {
        if r.is_empty() {
            continue;
        }
        if best.is_none_or(|(b, _)| r.area() > b.area()) {
            best = Some((r, side));
        }
    }
    best.ok_or(Error::NoPlacementRegion)
}

/// Strip thickness perpendicular to the border it touches.
pub fn strip_thickness(strip: &Rect, side: Side) -> usize {
    match side {
        Side::Left | Side::Right => strip.w,
        Side::Top | Side::Bottom => strip.h,
    }
}

/// A reference pair enlarged by reflection padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub image: Image,
    pub mask: Mask,
    /// Placement region in padded coordinates (the strip, doubled).
    pub region: Rect,
    /// Where the original image's top-left corner sits in the padded canvas.
    pub origin: (usize, usize),
}

/// Symmetric reflection index for a padded coordinate: position `n + k`
/// mirrors `n - 1 - k`, position `-1 - k` mirrors `k`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -1 - i
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r as usize
}

/// Reflection-pads the image and zero-pads the mask by `amount` on `side`.
/// `strip` is the placement strip in original coordinates; the returned
/// region is that strip grown by `amount` into the padding.
pub fn pad_reference(image: &Image, mask: &Mask, side: Side, amount: usize, strip: &Rect) -> Result<Padded> {
    let (w, h) = (image.width, image.height);
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::bad_shape("pad_reference", format!("mask {}x{} for image {w}x{h}", mask.width, mask.height)));
    }
    let along = match side {
        Side::Left | Side::Right => w,
        Side::Top | Side::Bottom => h,
    };
    if amount >= along {
        return Err(Error::InvalidArgument(format!(
            "reflection padding of {amount} needs a dimension larger than {along}"
        )));
    }
    let (pw, ph, ox, oy) = match side {
        Side::Left => (w + amount, h, amount, 0),
        Side::Right => (w + amount, h, 0, 0),
        Side::Top => (w, h + amount, 0, amount),
        Side::Bottom => (w, h + amount, 0, 0),
    };
    let mut out = Image::filled(pw, ph, image.channels, 0.0);
    let mut out_mask = Mask::zeros(pw, ph);
    for y in 0..ph {
        let sy = reflect(y as isize - oy as isize, h);
        let inside_y = y >= oy && y < oy + h;
        for x in 0..pw {
            let sx = reflect(x as isize - ox as isize, w);
            for c in 0..image.channels {
                out.set(c, y, x, image.get(c, sy, sx));
            }
            if inside_y && x >= ox && x < ox + w {
                out_mask.set(y, x, mask.get(y - oy, x - ox));
            }
        }
    }
    let region = match side {
        Side::Left => Rect::new(0, 0, strip.w + amount, ph),
        Side::Right => Rect::new(strip.x0, 0, strip.w + amount, ph),
        Side::Top => Rect::new(0, 0, pw, strip.h + amount),
        Side::Bottom => Rect::new(0, strip.y0, pw, strip.h + amount),
    };
    Ok(Padded {
        image: out,
        mask: out_mask,
        region,
        origin: (ox, oy),
    })
}

/// Result of pasting the pairing foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub image: Image,
    /// Binarized pasted mask on the padded canvas.
    pub mask: Mask,
    /// Where the resized foreground landed.
    pub rect: Rect,
    /// Foreground crop size before scaling.
    pub source: (usize, usize),
}

/// Crops the pairing foreground, scales it by a single factor to fit
/// `region`, places it uniformly at random inside the region and alpha-blends
/// it with the resampled soft mask.
pub fn fit_and_place<R: Rng>(
    canvas: &Image,
    pairing: &Triplet,
    region: &Rect,
    allow_upscale: bool,
    rng: &mut R,
) -> Result<Placement> {
    if region.is_empty() || !region.fits_in(canvas.width, canvas.height) {
        return Err(Error::NoPlacementRegion);
    }
    if pairing.image.channels != canvas.channels {
        return Err(Error::InvalidArgument(format!(
            "pairing image has {} channels, reference has {}",
            pairing.image.channels, canvas.channels
        )));
    }
    let fg = bounding_box(&pairing.mask)?;
    let mut s = (region.w as f64 / fg.w as f64).min(region.h as f64 / fg.h as f64);
    if !allow_upscale {
        s = s.min(1.0);
    }
    let nw = ((fg.w as f64 * s).round() as usize).min(region.w);
    let nh = ((fg.h as f64 * s).round() as usize).min(region.h);
    if nw == 0 || nh == 0 {
        return Err(Error::InvalidArgument(format!(
            "foreground {}x{} scales to an empty {nw}x{nh} patch",
            fg.w, fg.h
        )));
    }
    let patch = pairing.image.crop(&fg)?.resize(nw, nh);
    let soft = pairing.mask.crop(&fg)?.resize(nw, nh);
    let x0 = region.x0 + rng.gen_range(0..=region.w - nw);
    let y0 = region.y0 + rng.gen_range(0..=region.h - nh);

    let mut image = canvas.clone();
    let mut mask = Mask::zeros(canvas.width, canvas.height);
    for y in 0..nh {
        for x in 0..nw {
            let m = soft.get(y, x).clamp(0.0, 1.0);
            for c in 0..canvas.channels {
                let bg = image.get(c, y0 + y, x0 + x);
                image.set(c, y0 + y, x0 + x, m * patch.get(c, y, x) + (1.0 - m) * bg);
            }
            if m >= 0.5 {
                mask.set(y0 + y, x0 + x, 1.0);
            }
        }
    }
    Ok(Placement {
        image,
        mask,
        rect: Rect::new(x0, y0, nw, nh),
        source: (fg.w, fg.h),
    })
}

/// Picks one of the three (mask, prompt) options uniformly. Masks are
/// combined as `a * (1 - b)`, `b`, and `max(a, b)`.
pub fn mix_mask_prompt<R: Rng>(
    ref_mask: &Mask,
    pair_mask: &Mask,
    ref_prompt: PromptId,
    pair_prompt: PromptId,
    rng: &mut R,
) -> Result<(Mask, PromptId, MixOption)> {
    if (ref_mask.width, ref_mask.height) != (pair_mask.width, pair_mask.height) {
        return Err(Error::shape(
            "mix_mask_prompt",
            &[ref_mask.height, ref_mask.width],
            &[pair_mask.height, pair_mask.width],
        ));
    }
    let option = MixOption::ALL[rng.gen_range(0..3)];
    mix_with_option(ref_mask, pair_mask, ref_prompt, pair_prompt, option)
}

pub fn mix_with_option(
    ref_mask: &Mask,
    pair_mask: &Mask,
    ref_prompt: PromptId,
    pair_prompt: PromptId,
    option: MixOption,
) -> Result<(Mask, PromptId, MixOption)> {
    let combine = |f: fn(f32, f32) -> f32| Mask {
        width: ref_mask.width,
        height: ref_mask.height,
        data: ref_mask.data.iter().zip(&pair_mask.data).map(|(&a, &b)| f(a, b)).collect(),
    };
    Ok(match option {
        MixOption::RefMinusPair => (combine(|a, b| a * (1.0 - b)), ref_prompt, option),
        MixOption::Pair => (pair_mask.clone(), pair_prompt, option),
        MixOption::Union => {
            let p = ref_prompt.union(pair_prompt).ok_or_else(|| {
                Error::InvalidArgument(format!("no composite prompt for \"{ref_prompt}\" and \"{pair_prompt}\""))
            })?;
            (combine(f32::max), p, option)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaipConfig {
    pub enabled_fraction: f64,
    pub allow_upscale: bool,
}

impl Default for PaipConfig {
    fn default() -> Self {
        Self {
            enabled_fraction: 0.5,
            allow_upscale: true,
        }
    }
}

/// Whether a pairing prompt keeps every option unambiguous: its words must not
/// already appear in the reference scene and the composite must exist.
pub fn pairable(reference: &Triplet, pairing: &Triplet) -> bool {
    let scene: Vec<ShapeKind> = reference.scene_words();
    let words = pairing.prompt.words();
    !words.is_empty()
        && !reference.prompt.is_null()
        && words.iter().all(|w| !scene.contains(w))
        && reference.prompt.union(pairing.prompt).is_some()
}

/// Full pipeline on one (reference, pairing) pair, at the reference resolution.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub triplet: Triplet,
    pub option: MixOption,
    /// Reference and pasted masks on the padded canvas, before mixing.
    pub ref_mask: Mask,
    pub pair_mask: Mask,
    pub region: Rect,
    pub placed: Rect,
    pub padded: (usize, usize),
}

pub fn mix_pair<R: Rng>(reference: &Triplet, pairing: &Triplet, allow_upscale: bool, rng: &mut R) -> Result<Mixed> {
    let (w, h) = (reference.image.width, reference.image.height);
    let bbox = bounding_box(&reference.mask)?;
    let (strip, side) = largest_adjacent_rect(w, h, &bbox)?;
    let amount = strip_thickness(&strip, side);
    let padded = pad_reference(&reference.image, &reference.mask.binarize(0.5), side, amount, &strip)?;
    let placed = fit_and_place(&padded.image, pairing, &padded.region, allow_upscale, rng)?;
    let (mask, prompt, option) = mix_mask_prompt(&padded.mask, &placed.mask, reference.prompt, pairing.prompt, rng)?;
    let mut scene = reference.scene_words();
    for k in pairing.prompt.words() {
        if !scene.contains(&k) {
            scene.push(k);
        }
    }
    let triplet = Triplet {
        image: placed.image.resize(w, h),
        mask: mask.resize(w, h).binarize(0.5),
        prompt,
        scene,
    };
    Ok(Mixed {
        triplet,
        option,
        ref_mask: padded.mask,
        pair_mask: placed.mask,
        region: padded.region,
        placed: placed.rect,
        padded: (padded.image.width, padded.image.height),
    })
}

/// What happened to one batch entry.
#[derive(Clone, Debug, PartialEq)]
pub enum PaipEvent {
    Untouched,
    Mixed { partner: usize, option: MixOption },
    Skipped { partner: usize, reason: String },
}

/// Mixes a fraction of the batch. Entry `j` uses its own random stream
/// derived from `(seed, round, j)`, so results do not depend on processing
/// order. Failed or ambiguous pairings pass through unchanged.
pub fn paip_batch(batch: &[Triplet], cfg: &PaipConfig, seed: u64, round: u64) -> Result<(Vec<Triplet>, Vec<PaipEvent>)> {
    if !(0.0..=1.0).contains(&cfg.enabled_fraction) {
        return Err(Error::Config(format!("enabled_fraction {} outside [0, 1]", cfg.enabled_fraction)));
    }
    if cfg.enabled_fraction > 0.0 && batch.len() < 2 {
        return Err(Error::Config("instance pairing needs a batch of at least 2".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    let mut events = Vec::with_capacity(batch.len());
    for (j, reference) in batch.iter().enumerate() {
        let mut rng = stream(seed, round, j as u64);
        if cfg.enabled_fraction == 0.0 || !rng.gen_bool(cfg.enabled_fraction) {
            out.push(reference.clone());
            events.push(PaipEvent::Untouched);
            continue;
        }
        let mut k = rng.gen_range(0..batch.len() - 1);
        if k >= j {
            k += 1;
        }
        let res = if pairable(reference, &batch[k]) {
            mix_pair(reference, &batch[k], cfg.allow_upscale, &mut rng)
        } else {
            Err(Error::InvalidArgument(format!(
                "prompt \"{}\" cannot pair with \"{}\"",
                batch[k].prompt, reference.prompt
            )))
        };
        match res {
            Ok(m) => {
                events.push(PaipEvent::Mixed {
                    partner: k,
                    option: m.option,
                });
                out.push(m.triplet);
            }
            Err(e) => {
                log::debug!("pairing skipped for entry {j} with {k}: {e}");
                events.push(PaipEvent::Skipped {
                    partner: k,
                    reason: e.to_string(),
                });
                out.push(reference.clone());
            }
        }
    }
    Ok((out, events))
}

/// Partners tried per reference before giving up in [`mix_dataset`].
pub const MAX_PARTNER_TRIES: usize = 8;

/// Mixes every sample with a random pairable partner from the same set, as
/// for building a two-object benchmark. Sample `i` draws from
/// `(seed, round, i)`. Samples without a usable partner are left out; the
/// result holds `(source index, mixed)`.
pub fn mix_dataset(samples: &[Triplet], allow_upscale: bool, seed: u64, round: u64) -> Result<Vec<(usize, Mixed)>> {
    if samples.len() < 2 {
        return Err(Error::Config("mixing a dataset needs at least two samples".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (i, reference) in samples.iter().enumerate() {
        let mut rng = stream(seed, round, i as u64);
        let mut mixed = None;
        for _ in 0..MAX_PARTNER_TRIES {
            let mut k = rng.gen_range(0..samples.len() - 1);
            if k >= i {
                k += 1;
            }
            if !pairable(reference, &samples[k]) {
                continue;
            }
            match mix_pair(reference, &samples[k], allow_upscale, &mut rng) {
                Ok(m) => {
                    mixed = Some(m);
                    break;
                }
                Err(e) => log::debug!("mixing {i} with {k} failed: {e}"),
            }
        }
        match mixed {
            Some(m) => out.push((i, m)),
            None => log::debug!("no pairable partner for sample {i}"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(w, h);
        for &(y, x) in on {
            m.set(y, x, 1.0);
        }
        m
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(bounding_box(&mask_from(10, 10, &[(3, 5)])).unwrap(), Rect::new(5, 3, 1, 1));
        let full = Mask {
            width: 4,
            height: 3,
            data: vec![1.0; 12],
        };
        assert_eq!(bounding_box(&full).unwrap(), Rect::new(0, 0, 4, 3));
        let mut l = Vec::new();
        for y in 2..10 {
            l.push((y, 1));
        }
        for x in 1..5 {
            l.push((9, x));
        }
        assert_eq!(bounding_box(&mask_from(12, 12, &l)).unwrap(), Rect::new(1, 2, 4, 8));
        assert!(matches!(bounding_box(&Mask::zeros(3, 3)), Err(Error::EmptyForeground)));
    }

    #[test]
    fn strip_examples() {
        let (r, side) = largest_adjacent_rect(100, 100, &Rect::new(10, 40, 20, 50)).unwrap();
        assert_eq!((side, r.area()), (Side::Right, 7000));
        let (_, side) = largest_adjacent_rect(100, 100, &Rect::new(0, 0, 20, 50)).unwrap();
        assert_ne!(side, Side::Left);
        let (_, side) = largest_adjacent_rect(30, 30, &Rect::new(10, 10, 10, 10)).unwrap();
        assert_eq!(side, Side::Left);
        assert!(matches!(
            largest_adjacent_rect(5, 5, &Rect::new(0, 0, 5, 5)),
            Err(Error::NoPlacementRegion)
        ));
    }

    #[test]
    fn padding_doubles_region_and_reflects() {
        let img = Image::new(100, 2, 1, (0..200).map(|v| v as f32 / 200.0).collect()).unwrap();
        let mask = Mask::zeros(100, 2);
        let strip = Rect::new(30, 0, 70, 2);
        let p = pad_reference(&img, &mask, Side::Right, 70, &strip).unwrap();
        assert_eq!(p.image.width, 170);
        assert_eq!(p.region.w, 140);
        for k in 0..70 {
            assert_eq!(p.image.get(0, 1, 100 + k), img.get(0, 1, 99 - k));
        }
        let id = pad_reference(&img, &mask, Side::Left, 0, &Rect::new(0, 0, 0, 2)).unwrap();
        assert_eq!(id.image, img);
        assert!(pad_reference(&img, &mask, Side::Top, 2, &strip).is_err());
    }

    #[test]
    fn left_and_top_padding_mirror_the_leading_edge() {
        let img = Image::new(4, 3, 1, (0..12).map(|v| v as f32).collect()).unwrap();
        let mask = Mask::zeros(4, 3);
        let p = pad_reference(&img, &mask, Side::Left, 2, &Rect::new(0, 0, 2, 3)).unwrap();
        assert_eq!(p.origin, (2, 0));
        assert_eq!(p.region, Rect::new(0, 0, 4, 3));
        assert_eq!(&p.image.data[..6], &[1.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let p = pad_reference(&img, &mask, Side::Top, 1, &Rect::new(0, 0, 4, 1)).unwrap();
        assert_eq!(&p.image.data[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.image.data[4..8], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn mixing_identities() {
        let a = mask_from(3, 1, &[(0, 0), (0, 1)]);
        let b = mask_from(3, 1, &[(0, 1), (0, 2)]);
        let (p, q) = (PromptId(1), PromptId(2));
        let (m1, _, _) = mix_with_option(&a, &b, p, q, MixOption::RefMinusPair).unwrap();
        let (m2, _, _) = mix_with_option(&a, &b, p, q, MixOption::Pair).unwrap();
        let (m3, pu, _) = mix_with_option(&a, &b, p, q, MixOption::Union).unwrap();
        let joined: Vec<f32> = m1.data.iter().zip(&m2.data).map(|(x, y)| x.max(*y)).collect();
        assert_eq!(joined, m3.data);
        assert_eq!(pu, p.union(q).unwrap());
        let disjoint = mask_from(3, 1, &[(0, 2)]);
        let (m1, _, _) = mix_with_option(&mask_from(3, 1, &[(0, 0)]), &disjoint, p, q, MixOption::RefMinusPair).unwrap();
        assert_eq!(m1, mask_from(3, 1, &[(0, 0)]));
    }

    #[test]
    fn zero_fraction_is_identity_and_singleton_rejected() {
        let t = Triplet {
            image: Image::filled(8, 8, 1, 0.5),
            mask: mask_from(8, 8, &[(2, 2)]),
            prompt: PromptId(1),
            scene: vec![],
        };
        let batch = vec![t.clone(), t.clone()];
        let cfg = PaipConfig {
            enabled_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(paip_batch(&batch, &cfg, 1, 0).unwrap().0, batch);
        assert!(paip_batch(&batch[..1], &PaipConfig::default(), 1, 0).is_err());
    }
}
