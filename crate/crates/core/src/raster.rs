//! Planar images and masks, integer rectangles, bilinear resampling and PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Axis-aligned rectangle `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.x0 < other.x1()
            && other.x0 < self.x1()
            && self.y0 < other.y1()
            && other.y0 < self.y1()
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x1() <= width && self.y1() <= height
    }
}

/// Multi-channel image stored channel-major (`data[(c * height + y) * width + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn check_dims(op: &'static str, width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::bad_shape(op, format!("zero dimension in {width}x{height}x{channels}")));
    }
    if width * height * channels != len {
        return Err(Error::bad_shape(
            op,
            format!("{len} values for {width}x{height}x{channels}"),
        ));
    }
    Ok(())
}

/// Bilinear resampling of one plane with half-pixel centers and edge clamping.
pub fn resize_plane(src: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    if w == nw && h == nh {
        return src.to_vec();
    }
    let axis = |n: usize, nn: usize| -> Vec<(usize, usize, f32)> {
        let scale = n as f64 / nn as f64;
        (0..nn)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(w, nw);
    let ys = axis(h, nh);
    let mut out = Vec::with_capacity(nw * nh);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

fn crop_plane(src: &[f32], w: usize, r: &Rect) -> Vec<f32> {
    let mut out = Vec::with_capacity(r.area());
    for y in r.y0..r.y1() {
        out.extend_from_slice(&src[y * w + r.x0..y * w + r.x1()]);
    }
    out
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims("image", width, height, channels, data.len())?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        let mut data = Vec::with_capacity(width * height * self.channels);
        for c in 0..self.channels {
            data.extend(resize_plane(self.plane(c), self.width, self.height, width, height));
        }
        Image {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    pub fn crop(&self, r: &Rect) -> Result<Image> {
        if r.is_empty() || !r.fits_in(self.width, self.height) {
            return Err(Error::InvalidArgument(format!(
                "crop {r:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(r.area() * self.channels);
        for c in 0..self.channels {
            data.extend(crop_plane(self.plane(c), self.width, r));
        }
        Ok(Image {
            width: r.w,
            height: r.h,
            channels: self.channels,
            data,
        })
    }

    /// Unweighted mean over channels.
    pub fn grayscale(&self) -> Mask {
        let n = self.width * self.height;
        let mut data = vec![0.0f32; n];
        for c in 0..self.channels {
            for (d, &v) in data.iter_mut().zip(self.plane(c)) {
                *d += v;
            }
        }
        let k = self.channels as f32;
        data.iter_mut().for_each(|v| *v /= k);
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// `[1, channels, height, width]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image dims are positive")
    }

    /// Inverse of [`Image::to_tensor`] for a batch of one.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        match *t.shape() {
            [1, c, h, w] => Image::new(w, h, c, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => Err(Error::bad_shape("image_from_tensor", format!("expected [1, c, h, w], got {:?}", t.shape()))),
        }
    }

    pub fn load(path: &Path, channels: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Image::new(w as usize, h as usize, 1, g.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let (w, h) = (w as usize, h as usize);
                let raw = rgb.into_raw();
                let mut data = vec![0.0; w * h * 3];
                for (i, px) in raw.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = px[c] as f32 / 255.0;
                    }
                }
                Image::new(w, h, 3, data)
            }
            _ => Err(Error::InvalidArgument(format!("unsupported channel count {channels}"))),
        }
    }

    /// 8-bit PNG, gray or RGB by channel count; values are clipped to `[0, 1]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => {
                let buf: GrayImage = ImageBuffer::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                    .expect("buffer length matches dims");
                buf.save(path)
            }
            3 => {
                let n = self.width * self.height;
                let raw: Vec<u8> = (0..n)
                    .flat_map(|i| (0..3).map(move |c| (c, i)))
                    .map(|(c, i)| to_u8(self.data[c * n + i]))
                    .collect();
                let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer length matches dims");
                buf.save(path)
            }
            c => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims("mask", width, height, 1, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixels with value `>= 0.5`.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn binarize(&self, threshold: f32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn clip_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn resize(&self, width: usize, height: usize) -> Mask {
        Mask {
            width,
            height,
            data: resize_plane(&self.data, self.width, self.height, width, height),
        }
    }

    pub fn crop(&self, r: &Rect) -> Result<Mask> {
        if r.is_empty() || !r.fits_in(self.width, self.height) {
            return Err(Error::InvalidArgument(format!(
                "crop {r:?} outside {}x{} mask",
                self.width, self.height
            )));
        }
        Ok(Mask {
            width: r.w,
            height: r.h,
            data: crop_plane(&self.data, self.width, r),
        })
    }

    pub fn transpose(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.get(y, x));
            }
        }
        Mask {
            width: self.height,
            height: self.width,
            data,
        }
    }

    /// Replicates the mask into a `channels`-channel image.
    pub fn to_image(&self, channels: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels,
            data: self.data.repeat(channels),
        }
    }

    pub fn to_tensor<T: Scalar>(&self, channels: usize) -> Tensor<T> {
        self.to_image(channels).to_tensor()
    }

    /// Grayscale decode; values are divided by 255 without thresholding.
    pub fn load(path: &Path) -> Result<Mask> {
        let img = Image::load(path, 1)?;
        Ok(Mask {
            width: img.width,
            height: img.height,
            data: img.data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect()).expect("buffer length matches dims");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_relations() {
        let a = Rect::new(2, 3, 4, 5);
        assert_eq!((a.x1(), a.y1(), a.area()), (6, 8, 20));
        assert!(a.contains(2, 3) && !a.contains(6, 3));
        assert!(!a.intersects(&Rect::new(6, 0, 3, 20)));
        assert!(a.intersects(&Rect::new(5, 7, 3, 3)));
        assert!(a.contains_rect(&Rect::new(3, 4, 2, 2)));
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = Mask::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        assert_eq!(m.resize(3, 2), m);
        let c = Mask::new(5, 4, vec![0.3; 20]).unwrap().resize(11, 7);
        assert!(c.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn upsample_then_downsample_by_two_is_identity() {
        // half-pixel bilinear: 2x down of a 2x nearest-like upsample averages pairs
        let m = Mask::new(2, 1, vec![0.0, 1.0]).unwrap();
        let up = m.resize(4, 1);
        assert_eq!(up.data, vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(up.resize(2, 1).data, vec![0.125, 0.875]);
    }

    #[test]
    fn grayscale_of_identical_channels() {
        let m = Mask::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(m.to_image(3).grayscale(), m);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        m.save(&p).unwrap();
        assert_eq!(Mask::load(&p).unwrap(), m);

        let img = Image::new(2, 1, 3, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0]).unwrap();
        let p = dir.path().join("i.png");
        img.save(&p).unwrap();
        let back = Image::load(&p, 3).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
        assert!(Image::load(&dir.path().join("missing.png"), 1).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let m = Mask::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        assert_eq!(m.transpose().get(2, 1), m.get(1, 2));
        assert_eq!(m.transpose().transpose(), m);
    }
}
