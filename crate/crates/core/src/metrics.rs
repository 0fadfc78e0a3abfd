//! Image quality metrics: PSNR, SSIM, and a pluggable perceptual slot.
//!
//! PSNR is capped at 100 dB so identical images stay finite in tables.
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid positions,
//! computed per channel and averaged. Perceptual distance is a plugin
//! boundary: when no plugin is registered the report marks the column
//! absent instead of failing.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrError};
use crate::image_tensor::ImageTensor;
use crate::models::SrModel;

/// Hard ceiling in dB; also the value reported for a zero-MSE pair.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    if a.data().shape() != b.data().shape() {
        return Err(SrError::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.data().shape(),
            b.data().shape()
        )));
    }
    if max_val <= 0.0 {
        return Err(SrError::Metric("max_val must be positive".into()));
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity, mean over valid window positions and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if a.data().shape() != b.data().shape() {
        return Err(SrError::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.data().shape(),
            b.data().shape()
        )));
    }
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h < window || w < window {
        return Err(SrError::Metric(format!(
            "image {h}x{w} smaller than ssim window {window}"
        )));
    }
    let g = gaussian_window(window, 1.5);
    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for top in 0..=h - window {
            for left in 0..=w - window {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for dy in 0..window {
                    for dx in 0..window {
                        let weight = g[dy] * g[dx];
                        let x = a.data()[[top + dy, left + dx, c]];
                        let y = b.data()[[top + dy, left + dx, c]];
                        mu_x += weight * x;
                        mu_y += weight * y;
                        xx += weight * x * x;
                        yy += weight * y * y;
                        xy += weight * x * y;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the standard window and stabilizers.
pub fn ssim_default(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim(a, b, 11, 0.01, 0.03)
}

/// A perceptual distance implementation; zero for identical inputs.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Distance through an optional plugin; `None` means absent, not failure.
pub fn perceptual(
    a: &ImageTensor,
    b: &ImageTensor,
    plugin: Option<&dyn PerceptualMetric>,
) -> Result<Option<f64>> {
    match plugin {
        None => Ok(None),
        Some(p) => {
            if a.data().shape() != b.data().shape() {
                return Err(SrError::Shape(format!(
                    "perceptual shapes differ: {:?} vs {:?}",
                    a.data().shape(),
                    b.data().shape()
                )));
            }
            Ok(Some(p.distance(a, b)?))
        }
    }
}

/// Metrics for one test image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
}

/// A per-image failure captured during evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageFailure {
    pub name: String,
    pub message: String,
}

/// Aggregated evaluation results for one model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub per_image: Vec<ImageMetrics>,
    pub failures: Vec<ImageFailure>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: Option<f64>,
}

impl MetricsReport {
    fn aggregate(
        dataset: String,
        model: String,
        per_image: Vec<ImageMetrics>,
        failures: Vec<ImageFailure>,
    ) -> Self {
        let n = per_image.len() as f64;
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n.max(1.0);
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n.max(1.0);
        let have_perceptual = !per_image.is_empty()
            && per_image.iter().all(|m| m.perceptual.is_some());
        let mean_perceptual = have_perceptual.then(|| {
            per_image.iter().map(|m| m.perceptual.unwrap()).sum::<f64>() / n
        });
        Self { dataset, model, per_image, failures, mean_psnr_db, mean_ssim, mean_perceptual }
    }
}

/// One full-image evaluation pair.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

/// Builds LR/HR pairs by degrading a high-resolution corpus.
pub fn eval_pairs_from_hr(
    corpus: &[(String, ImageTensor)],
    config: &crate::resize::DegradationConfig,
) -> Result<Vec<EvalPair>> {
    corpus
        .iter()
        .map(|(name, hr)| {
            let hr = hr.center_crop_to_multiple(config.scale)?;
            let lr = crate::resize::degrade(&hr, config)?;
            Ok(EvalPair { name: name.clone(), lr, hr })
        })
        .collect()
}

/// Evaluation knobs: optional symmetric border crop before metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub border_crop: usize,
}

fn maybe_crop(img: &ImageTensor, border: usize) -> Result<ImageTensor> {
    if border == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    if 2 * border >= h || 2 * border >= w {
        return Err(SrError::Metric(format!(
            "border {border} leaves no pixels in {h}x{w}"
        )));
    }
    img.crop(border, border, h - 2 * border, w - 2 * border)
}

fn evaluate_one(
    model: &SrModel,
    pair: &EvalPair,
    options: &EvalOptions,
    plugin: Option<&dyn PerceptualMetric>,
) -> Result<ImageMetrics> {
    let lr_nchw = pair.lr.to_chw().insert_axis(ndarray::Axis(0)).into_dyn();
    let out = model.forward(&lr_nchw)?;
    let sr = ImageTensor::from_chw(&out.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn())?;
    if sr.data().shape() != pair.hr.data().shape() {
        return Err(SrError::Shape(format!(
            "{}: model output {:?} vs ground truth {:?}",
            pair.name,
            sr.data().shape(),
            pair.hr.data().shape()
        )));
    }
    let sr_c = maybe_crop(&sr, options.border_crop)?;
    let hr_c = maybe_crop(&pair.hr, options.border_crop)?;
    Ok(ImageMetrics {
        name: pair.name.clone(),
        psnr_db: psnr(&sr_c, &hr_c, 1.0)?,
        ssim: ssim_default(&sr_c, &hr_c)?,
        perceptual: perceptual(&sr_c, &hr_c, plugin)?,
    })
}

/// Runs the model over a testset, recording per-image failures and
/// aggregating means over the successes.
pub fn evaluate_model(
    model: &SrModel,
    dataset_name: &str,
    testset: &[EvalPair],
    options: &EvalOptions,
    plugin: Option<&dyn PerceptualMetric>,
) -> Result<MetricsReport> {
    if testset.is_empty() {
        return Err(SrError::Metric("empty testset".into()));
    }
    let mut per_image = Vec::with_capacity(testset.len());
    let mut failures = Vec::new();
    for pair in testset {
        match evaluate_one(model, pair, options, plugin) {
            Ok(m) => per_image.push(m),
            Err(e) => failures.push(ImageFailure {
                name: pair.name.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(MetricsReport::aggregate(
        dataset_name.to_string(),
        format!("{}-x{}", model.architecture.name(), model.scale),
        per_image,
        failures,
    ))
}
