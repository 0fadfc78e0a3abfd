//! In-memory image representation shared by every stage.

use std::path::Path;

use ndarray::{Array3, ArrayD};

use crate::error::{Result, SrError};

/// H×W×C array of pixel intensities in [0,1].
///
/// All image math in the crate runs on this type; networks see the same
/// data rearranged into NCHW batches via [`ImageTensor::to_chw`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an H×W×C array, validating the value range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, _) = data.dim();
        if h == 0 || w == 0 {
            return Err(SrError::Shape("image dimensions must be at least 1x1".into()));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(SrError::Shape("pixel values must be finite and within [0,1]".into()));
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { data: Array3::from_elem((height, width, channels), value.clamp(0.0, 1.0)) }
    }

    /// Builds an image from a per-pixel closure; values are clamped to [0,1].
    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        height: usize,
        width: usize,
        channels: usize,
        mut f: F,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn((height, width, channels), |(y, x, c)| {
                f(y, x, c).clamp(0.0, 1.0)
            }),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Rectangular crop. `size` must fit inside the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(SrError::Shape(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                height,
                width,
                top,
                left,
                self.height(),
                self.width()
            )));
        }
        let view = self
            .data
            .slice(ndarray::s![top..top + height, left..left + width, ..]);
        Ok(Self { data: view.to_owned() })
    }

    /// Center-crops to the largest size divisible by `multiple` per axis.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<Self> {
        let h = (self.height() / multiple) * multiple;
        let w = (self.width() / multiple) * multiple;
        if h == 0 || w == 0 {
            return Err(SrError::Shape(format!(
                "image {}x{} too small for multiple {}",
                self.height(),
                self.width(),
                multiple
            )));
        }
        let top = (self.height() - h) / 2;
        let left = (self.width() - w) / 2;
        self.crop(top, left, h, w)
    }

    /// Rearranges to a CHW array for network input.
    pub fn to_chw(&self) -> ArrayD<f64> {
        let (h, w, c) = self.data.dim();
        ArrayD::from_shape_fn(vec![c, h, w], |ix| self.data[(ix[1], ix[2], ix[0])])
    }

    /// Builds an image from a CHW array, clamping values to [0,1].
    pub fn from_chw(chw: &ArrayD<f64>) -> Result<Self> {
        let shape = chw.shape();
        if shape.len() != 3 {
            return Err(SrError::Shape(format!("expected CHW array, got {:?}", shape)));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            chw[[ch, y, x]].clamp(0.0, 1.0)
        });
        Ok(Self { data })
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(SrError::Shape("image shapes differ".into()));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Loads an 8-bit image file and normalizes to [0,1].
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SrError::Ingest { file: path.to_path_buf(), reason: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
        });
        Ok(Self { data })
    }

    /// Saves as an 8-bit RGB PNG. Values exactly representable as k/255
    /// round-trip bit-exactly.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels() != 3 {
            return Err(SrError::Shape(format!(
                "PNG export expects 3 channels, got {}",
                self.channels()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.data[(y, x, 0)]),
                    quantize(self.data[(y, x, 1)]),
                    quantize(self.data[(y, x, 2)]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
