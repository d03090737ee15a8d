use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// `H × W × 3` RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("image has {} channels, expected 3", data.dim().2)));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Degenerate("image values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Gray image repeated on all three channels.
    pub fn from_gray(gray: &Array2<f64>) -> Result<Self> {
        let (h, w) = gray.dim();
        Self::new(Array3::from_shape_fn((h, w, 3), |(i, j, _)| gray[[i, j]]))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Luma with weights 0.299, 0.587, 0.114.
    pub fn gray(&self) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            0.299 * self.data[[i, j, 0]] + 0.587 * self.data[[i, j, 1]] + 0.114 * self.data[[i, j, 2]]
        })
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
            img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
        });
        Self { data }
    }

    fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Reads a PNG (or any format the decoder recognises); when `size` is
    /// given and differs, the image is resized to `(height, width)` with a
    /// triangle filter.
    pub fn load(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::load(path, e))?.to_rgb8();
        let img = match size {
            Some((h, w)) if (h as u32, w as u32) != (img.height(), img.width()) => {
                image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
            }
            _ => img,
        };
        Ok(Self::from_rgb8(&img))
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Resized copy, `(height, width)`.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.height(), self.width()) {
            return self.clone();
        }
        let img = image::imageops::resize(&self.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
        Self::from_rgb8(&img)
    }
}
