//! `ImageTensor`: an H×W×C intensity array in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size mismatch");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self, y: usize, x: usize) -> f64 {
        let off = (y * self.width + x) * self.channels;
        self.data[off..off + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {height}x{width} at ({top},{left}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, self.channels, |y, x, c| self.get(top + y, left + x, c)))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(self.height - 1 - y, x, c))
    }

    /// Rotation by 90° counter-clockwise.
    pub fn rot90(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |y, x, c| self.get(x, self.width - 1 - y, c))
    }

    pub fn rot90_times(&self, k: usize) -> Image {
        (0..k % 4).fold(self.clone(), |img, _| img.rot90())
    }

    /// Decode an 8-bit PNG (any color type) to RGB in [0, 1].
    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(Image::new(h, w, 3, rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()))
    }

    /// Quantize to 8-bit RGB (or gray for single-channel images).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Round-trip through 8-bit quantization, as a PNG save/load would.
    pub fn quantized(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        )
    }
}

/// Stack equally sized HWC images into an NCHW tensor.
pub fn images_to_batch(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dims() != (h, w, c) {
            return Err(Error::ShapeMismatch(format!("batch mixes {:?} and {:?}", (h, w, c), img.dims())));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, ch));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data))
}

pub fn batch_to_images(batch: &Tensor) -> Vec<Image> {
    let (n, c, h, w) = batch.dims4();
    (0..n)
        .map(|b| {
            let off = b * c * h * w;
            Image::from_fn(h, w, c, |y, x, ch| batch.data()[off + (ch * h + y) * w + x])
        })
        .collect()
}
