//! Linear RGB images stored as `f32` in `[0, 1]`, row-major HWC.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::numeric::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(width > 0 && height > 0, "image must be non-empty");
        ensure!(
            data.len() == width * height * 3,
            "image buffer has {} values, expected {}",
            data.len(),
            width * height * 3
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `[h, w, 3]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::c(self.data[i] as f64))
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self { data, ..*self }
    }

    /// Nearest-neighbour downsampling by an integer factor.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        ensure!(
            factor > 0 && self.width.is_multiple_of(factor) && self.height.is_multiple_of(factor),
            "image {}x{} not divisible by {factor}",
            self.width,
            self.height
        );
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(x * factor, y * factor));
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode_png(&bytes).map_err(|e| match e {
            Error::Image(e) => Error::Config(format!("{}: {e}", path.display())),
            e => e,
        })
    }
}
