//! Pixel grids. Images are stored planar (`C × H × W`) with values nominally
//! in `[-1, 1]`; batches stack images contiguously (`B × C × H × W`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn rgb(height: usize, width: usize) -> Self {
        Self::new(3, height, width)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    dims: ImageDims,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(dims: ImageDims) -> Self {
        Self { dims, data: vec![0.0; dims.len()] }
    }

    pub fn filled(dims: ImageDims, value: f32) -> Self {
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: ImageDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values ({dims})", dims.len()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.dims.height + y) * self.dims.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        let i = (c * self.dims.height + y) * self.dims.width + x;
        &mut self.data[i]
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: self.dims.to_string(),
                got: other.dims.to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Image {
        debug_assert_eq!(self.dims, other.dims);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Image { dims: self.dims, data }
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Image {
        self.map(|v| v * s)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    /// 8-bit quantisation used by every PNG export: `round((x + 1) * 127.5)`.
    pub fn to_u8(v: f32) -> u8 {
        ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
    }

    pub fn from_u8(v: u8) -> f32 {
        f32::from(v) / 127.5 - 1.0
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.dims.channels != 3 {
            return Err(invalid(format!("PNG export needs 3 channels, image is {}", self.dims)));
        }
        let (h, w) = (self.dims.height, self.dims.width);
        Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| Self::to_u8(self.at(c, y, x))))
        }))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Image::zeros(ImageDims::rgb(h, w));
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                *img.at_mut(c, y as usize, x as usize) = Self::from_u8(p.0[c]);
            }
        }
        Ok(img)
    }
}

/// A contiguous stack of equally-sized images.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dims: ImageDims,
    len: usize,
    data: Vec<f32>,
}

impl Batch {
    pub fn zeros(dims: ImageDims, len: usize) -> Self {
        Self { dims, len, data: vec![0.0; dims.len() * len] }
    }

    pub fn from_vec(dims: ImageDims, len: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() * len {
            return Err(Error::ShapeMismatch {
                expected: format!("{len} x {dims}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { dims, len, data })
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut iter = images.into_iter().peekable();
        let dims = iter.peek().map(|i| i.dims()).ok_or_else(|| invalid("empty batch"))?;
        let mut data = Vec::new();
        let mut len = 0;
        for img in iter {
            if img.dims() != dims {
                return Err(Error::ShapeMismatch { expected: dims.to_string(), got: img.dims().to_string() });
            }
            data.extend_from_slice(img.data());
            len += 1;
        }
        Ok(Self { dims, len, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.dims.len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        Image { dims: self.dims, data: self.item(i).to_vec() }
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.len).map(|i| self.image(i)).collect()
    }

    pub fn push(&mut self, img: &Image) {
        debug_assert_eq!(img.dims(), self.dims);
        self.data.extend_from_slice(img.data());
        self.len += 1;
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        let n = self.dims.len();
        Self { dims: self.dims, len: range.len(), data: self.data[range.start * n..range.end * n].to_vec() }
    }

    pub fn extend(&mut self, other: &Batch) {
        debug_assert_eq!(self.dims, other.dims);
        self.data.extend_from_slice(&other.data);
        self.len += other.len;
    }

    pub fn concat(&self, other: &Batch) -> Batch {
        debug_assert_eq!(self.dims, other.dims);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Batch { dims: self.dims, len: self.len + other.len, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A single-channel `H × W` scalar field (saliency, accumulated change, masks as floats).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Map2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v))
    }

    /// Grayscale heatmap scaled by the map maximum; all-zero maps stay black.
    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.max();
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.data[y as usize * self.width + x as usize];
            let s = if max > 0.0 { v / max } else { 0.0 };
            image::Luma([(s.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path.as_ref())?;
        Ok(())
    }
}

/// Tile images into a single grid PNG, `cols` per row, with a 1-pixel gap.
pub fn save_grid(images: &[Image], cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let first = images.first().ok_or_else(|| invalid("empty image grid"))?;
    let d = first.dims();
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * (d.width + 1) - 1;
    let gh = rows * (d.height + 1) - 1;
    let mut canvas = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([0, 0, 0]));
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * (d.width + 1), (k / cols) * (d.height + 1));
        let rgb = img.to_rgb8()?;
        for (x, y, p) in rgb.enumerate_pixels() {
            canvas.put_pixel(ox as u32 + x, oy as u32 + y, *p);
        }
    }
    canvas.save(path.as_ref())?;
    Ok(())
}
