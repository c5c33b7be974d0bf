//! Planar image containers and conversion to network tensors.
//!
//! [`Image`] holds normalized intensities in `[-1, 1]`, [`Image8`] holds 8-bit
//! samples. Both store channels as separate planes (CHW order), matching the
//! tensor layout.

use std::path::Path;

use bag_autograd::Tensor;

use crate::error::{BagError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(BagError::Structural(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Window of size `h` x `w` with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(BagError::Undersized(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// `[1, C, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, self.channels, self.height, self.width])
    }

    /// Stacks same-sized images into `[N, C, H, W]`.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| BagError::Structural("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(BagError::Structural(format!(
                    "cannot stack {:?} with {:?}",
                    img.dims(),
                    first.dims()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            data,
            &[images.len(), first.channels, first.height, first.width],
        ))
    }

    /// Sample `n` of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        if t.rank() != 4 || n >= t.dim(0) {
            return Err(BagError::Structural(format!(
                "sample {n} of tensor shaped {:?}",
                t.shape()
            )));
        }
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        let len = c * h * w;
        Image::new(c, h, w, t.data()[n * len..(n + 1) * len].to_vec())
    }
}

impl Image8 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(BagError::Structural(format!(
                "{} samples for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Decodes a PNG or JPEG file into a 3-channel image.
    pub fn load(path: &Path) -> Result<Image8> {
        let dynamic = image::open(path).map_err(|source| BagError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb(&dynamic.to_rgb8()))
    }

    pub fn from_rgb(rgb: &image::RgbImage) -> Image8 {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0u8; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c];
            }
        }
        Image8 {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(BagError::Structural(format!(
                "RGB output needs 3 channels, image has {}",
                self.channels
            )));
        }
        let (h, w) = (self.height, self.width);
        Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| self.data[(c * h + y as usize) * w + x as usize];
            image::Rgb([at(0), at(1), at(2)])
        }))
    }

    /// Writes the image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| BagError::io(dir, e))?;
            }
        }
        self.to_rgb()?.save(path).map_err(|source| BagError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Affine map from 8-bit samples to `[-1, 1]` (0 -> -1, 255 -> +1).
pub fn normalize(img: &Image8) -> Image {
    Image {
        channels: img.channels,
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| v as f64 / 127.5 - 1.0).collect(),
    }
}

/// Inverse of [`normalize`], rounding to the nearest integer and clamping.
pub fn denormalize(img: &Image) -> Image8 {
    Image8 {
        channels: img.channels,
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}
