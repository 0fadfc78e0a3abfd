//! Separable bicubic resampling with precomputed tap tables.
//!
//! One plan serves both the plain image path and the differentiable graph
//! path. Both call [`ResizePlan::resample_plane`], so an LR image produced
//! during data preparation is bitwise identical to the one produced inside
//! a distillation graph. Downscaling widens the kernel by the scale factor
//! (antialiasing); upscaling uses the plain Catmull-Rom kernel.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrError};
use crate::image_tensor::ImageTensor;

/// How an HR image is degraded to its LR counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub scale: usize,
    pub method: DegradationMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMethod {
    Bicubic,
}

impl DegradationConfig {
    pub fn bicubic(scale: usize) -> Self {
        Self { scale, method: DegradationMethod::Bicubic }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(SrError::Config("degradation scale must be at least 1".into()));
        }
        Ok(())
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Tap table for one axis: each output index maps to (input index, weight)
/// pairs with weights normalized to sum 1. Border taps are clamped.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let kernel_scale = scale.max(1.0);
    let support = 2.0 * kernel_scale;
    let mut taps = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let lo = (src - support).ceil() as isize;
        let hi = (src + support).floor() as isize;
        let mut entries: Vec<(usize, f64)> = Vec::new();
        let mut total = 0.0;
        for i in lo..=hi {
            let w = cubic((src - i as f64) / kernel_scale);
            if w == 0.0 {
                continue;
            }
            total += w;
            let idx = i.clamp(0, n_in as isize - 1) as usize;
            match entries.iter_mut().find(|(j, _)| *j == idx) {
                Some((_, acc)) => *acc += w,
                None => entries.push((idx, w)),
            }
        }
        for (_, w) in entries.iter_mut() {
            *w /= total;
        }
        entries.retain(|(_, w)| *w != 0.0);
        taps.push(entries);
    }
    taps
}

/// Precomputed separable resize from (in_h, in_w) to (out_h, out_w).
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    h_taps: Vec<Vec<(usize, f64)>>,
    w_taps: Vec<Vec<(usize, f64)>>,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(SrError::Shape("resize dimensions must be positive".into()));
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            h_taps: axis_taps(in_h, out_h),
            w_taps: axis_taps(in_w, out_w),
        })
    }

    /// Integer-factor downscale plan.
    pub fn downscale(in_h: usize, in_w: usize, scale: usize) -> Result<Self> {
        if scale < 1 {
            return Err(SrError::Config("scale must be at least 1".into()));
        }
        if in_h % scale != 0 || in_w % scale != 0 {
            return Err(SrError::Shape(format!(
                "dimensions {}x{} not divisible by scale {}",
                in_h, in_w, scale
            )));
        }
        Self::new(in_h, in_w, in_h / scale, in_w / scale)
    }

    /// Integer-factor upscale plan.
    pub fn upscale(in_h: usize, in_w: usize, scale: usize) -> Result<Self> {
        if scale < 1 {
            return Err(SrError::Config("scale must be at least 1".into()));
        }
        Self::new(in_h, in_w, in_h * scale, in_w * scale)
    }

    /// Resamples one plane, rows axis first, then columns.
    pub fn resample_plane(&self, plane: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(plane.dim(), (self.in_h, self.in_w));
        let mut mid = Array2::<f64>::zeros((self.out_h, self.in_w));
        for (o, taps) in self.h_taps.iter().enumerate() {
            for &(i, w) in taps {
                let src = plane.index_axis(Axis(0), i);
                let mut dst = mid.index_axis_mut(Axis(0), o);
                dst.scaled_add(w, &src);
            }
        }
        let mut out = Array2::<f64>::zeros((self.out_h, self.out_w));
        for (o, taps) in self.w_taps.iter().enumerate() {
            for &(i, w) in taps {
                let src = mid.index_axis(Axis(1), i);
                let mut dst = out.index_axis_mut(Axis(1), o);
                dst.scaled_add(w, &src);
            }
        }
        out
    }

    /// Transpose of [`Self::resample_plane`]: scatters an out-sized plane
    /// back to input size with the same weights.
    pub fn resample_plane_transpose(&self, plane: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(plane.dim(), (self.out_h, self.out_w));
        let mut mid = Array2::<f64>::zeros((self.out_h, self.in_w));
        for (o, taps) in self.w_taps.iter().enumerate() {
            for &(i, w) in taps {
                let src = plane.index_axis(Axis(1), o);
                let mut dst = mid.index_axis_mut(Axis(1), i);
                dst.scaled_add(w, &src);
            }
        }
        let mut out = Array2::<f64>::zeros((self.in_h, self.in_w));
        for (o, taps) in self.h_taps.iter().enumerate() {
            for &(i, w) in taps {
                let src = mid.index_axis(Axis(0), o);
                let mut dst = out.index_axis_mut(Axis(0), i);
                dst.scaled_add(w, &src);
            }
        }
        out
    }

    /// Applies the plan to an H×W×C image without clamping.
    pub fn apply_hwc(&self, data: &Array3<f64>) -> Array3<f64> {
        let (_, _, c) = data.dim();
        let mut out = Array3::<f64>::zeros((self.out_h, self.out_w, c));
        for ch in 0..c {
            let plane = data.index_axis(Axis(2), ch).to_owned();
            let res = self.resample_plane(&plane);
            out.index_axis_mut(Axis(2), ch).assign(&res);
        }
        out
    }

    /// Applies the plan to every plane of an NCHW batch.
    pub fn apply_nchw(&self, data: &ArrayD<f64>) -> ArrayD<f64> {
        let x = data.view().into_dimensionality::<Ix4>().expect("NCHW input");
        let (n, c, _, _) = x.dim();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, self.out_h, self.out_w));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).to_owned();
                let res = self.resample_plane(&plane);
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&res);
            }
        }
        out.into_dyn()
    }

    /// Transpose application on an NCHW batch (gradient scatter).
    pub fn apply_nchw_transpose(&self, data: &ArrayD<f64>) -> ArrayD<f64> {
        let x = data.view().into_dimensionality::<Ix4>().expect("NCHW input");
        let (n, c, _, _) = x.dim();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, self.in_h, self.in_w));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).to_owned();
                let res = self.resample_plane_transpose(&plane);
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&res);
            }
        }
        out.into_dyn()
    }
}

/// Bicubic degradation of an HR image. Input dimensions must be divisible
/// by the scale; callers crop beforehand (see `ImageTensor::center_crop_to_multiple`).
pub fn degrade(hr: &ImageTensor, config: &DegradationConfig) -> Result<ImageTensor> {
    config.validate()?;
    let plan = ResizePlan::downscale(hr.height(), hr.width(), config.scale)?;
    let raw = plan.apply_hwc(hr.data());
    ImageTensor::new(raw.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Bicubic upscale by an integer factor, as used for pre-upsampled inputs.
pub fn upscale(lr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let plan = ResizePlan::upscale(lr.height(), lr.width(), scale)?;
    let raw = plan.apply_hwc(lr.data());
    ImageTensor::new(raw.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Bicubic resize to an arbitrary target size with [0,1] clamping.
pub fn resize_to(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let plan = ResizePlan::new(img.height(), img.width(), out_h, out_w)?;
    let raw = plan.apply_hwc(img.data());
    ImageTensor::new(raw.mapv(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let img = ImageTensor::from_fn(8, 9, 3, |y, x, c| {
            ((y * 13 + x * 7 + c) % 10) as f64 / 10.0
        });
        let plan = ResizePlan::new(8, 9, 8, 9).unwrap();
        let out = plan.apply_hwc(img.data());
        assert_eq!(&out, img.data());
    }

    #[test]
    fn constant_preserved_at_half_size() {
        let img = ImageTensor::constant(16, 16, 3, 0.5);
        let lr = degrade(&img, &DegradationConfig::bicubic(2)).unwrap();
        assert_eq!((lr.height(), lr.width()), (8, 8));
        for v in lr.data().iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_one_is_identity() {
        let img = ImageTensor::from_fn(6, 6, 3, |y, x, _| (y as f64 + x as f64) / 12.0);
        let out = degrade(&img, &DegradationConfig::bicubic(1)).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn rejects_indivisible_dims() {
        let img = ImageTensor::constant(9, 8, 3, 0.3);
        assert!(degrade(&img, &DegradationConfig::bicubic(2)).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        // <A x, y> == <x, A^T y> for random x, y.
        use rand::Rng;
        let mut rng = crate::rng::stream(11, &[0]);
        let plan = ResizePlan::new(12, 10, 6, 5).unwrap();
        let x = Array2::from_shape_fn((12, 10), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let ax = plan.resample_plane(&x);
        let aty = plan.resample_plane_transpose(&y);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn hwc_and_nchw_paths_match_bitwise() {
        let img = ImageTensor::from_fn(14, 12, 3, |y, x, c| {
            ((y * 31 + x * 17 + c * 97) % 101) as f64 / 101.0
        });
        let plan = ResizePlan::downscale(14, 12, 2).unwrap();
        let hwc = plan.apply_hwc(img.data());
        let chw = img.to_chw().insert_axis(ndarray::Axis(0));
        let nchw = plan.apply_nchw(&chw.into_dyn());
        for y in 0..7 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(hwc[(y, x, c)], nchw[[0, c, y, x]]);
                }
            }
        }
    }
}
