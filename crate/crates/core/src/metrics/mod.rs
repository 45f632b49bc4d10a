//! Image-quality metrics and the Fréchet distance between feature statistics.

mod features;
mod frechet;
mod report;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{to_display, GuidedSample};

pub use features::{extract_features, FeatureExtractor, HandcraftedExtractor, HANDCRAFTED_DIM, HANDCRAFTED_ID};
pub use frechet::{frechet_distance, sqrtm_psd, FeatureStats, SHRINKAGE};
pub use report::{evaluate_translation, Aggregate, EvalInputs, FidEntry, ImageRow, MetricsReport, ReportMeta};

pub const DEFAULT_MAX_VALUE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {got:?} is smaller than the {window}x{window} window")]
    TooSmall { got: (usize, usize), window: usize },
    #[error("feature dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("{n} samples cannot define a covariance (need at least 2)")]
    NotEnoughSamples { n: usize },
    #[error("covariance is not symmetric positive semi-definite: {0}")]
    NotPsd(String),
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error("paired datasets disagree on ids: {}", .0.join(", "))]
    IdMismatch(Vec<String>),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Single-channel image on the 0-255 display scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl DisplayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, MetricsError> {
        if pixels.len() != width * height || pixels.is_empty() {
            return Err(MetricsError::Invalid(format!("{} pixels do not form a {width}x{height} image", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Maps a sample's `[-1, 1]` intensities to the display scale.
    pub fn from_sample(s: &GuidedSample) -> Self {
        Self {
            width: s.width,
            height: s.height,
            pixels: s.image.iter().map(|&v| to_display(v)).collect(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

fn same_shape(a: &DisplayImage, b: &DisplayImage) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

pub fn mse(a: &DisplayImage, b: &DisplayImage) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `None` when the images are identical.
pub fn psnr(a: &DisplayImage, b: &DisplayImage, max_value: f64) -> Result<Option<f64>, MetricsError> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(MetricsError::Invalid(format!("max_value {max_value} must be positive")));
    }
    let e = mse(a, b)?;
    Ok((e > 0.0).then(|| 10.0 * (max_value * max_value / e).log10()))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over every full window position.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11x11 Gaussian-weighted windows
/// (sigma 1.5) that fit inside the image.
pub fn ssim(a: &DisplayImage, b: &DisplayImage, max_value: f64) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            got: a.dims(),
            window: SSIM_WINDOW,
        });
    }
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(MetricsError::Invalid(format!("max_value {max_value} must be positive")));
    }
    let (w, h) = a.dims();
    let k = gaussian_kernel();
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a.pixels, w, h, &k);
    let mu_b = filter_valid(&b.pixels, w, h, &k);
    let e_aa = filter_valid(&prod(&a.pixels, &a.pixels), w, h, &k);
    let e_bb = filter_valid(&prod(&b.pixels, &b.pixels), w, h, &k);
    let e_ab = filter_valid(&prod(&a.pixels, &b.pixels), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// `(mse, psnr, ssim)` for many pairs, in input order.
pub fn paired_metrics(pairs: &[(&DisplayImage, &DisplayImage)], max_value: f64) -> Result<Vec<(f64, Option<f64>, f64)>, MetricsError> {
    pairs
        .par_iter()
        .map(|(a, b)| Ok((mse(a, b)?, psnr(a, b, max_value)?, ssim(a, b, max_value)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img(w: usize, h: usize, v: &[f64]) -> DisplayImage {
        DisplayImage::new(w, h, v.to_vec()).unwrap()
    }

    fn random(side: usize, rng: &mut ChaCha8Rng) -> DisplayImage {
        DisplayImage::new(side, side, (0..side * side).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = img(2, 1, &[0.0, 0.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &img(2, 1, &[2.0, 4.0])).unwrap(), 10.0);
        assert_eq!(mse(&DisplayImage::constant(4, 4, 0.0), &DisplayImage::constant(4, 4, 255.0)).unwrap(), 65025.0);
        assert!(matches!(mse(&a, &img(1, 2, &[0.0, 0.0])), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn psnr_ladder() {
        let a = DisplayImage::constant(4, 4, 0.0);
        assert!((psnr(&a, &DisplayImage::constant(4, 4, 255.0), 255.0).unwrap().unwrap()).abs() < 1e-9);
        // mse = 255^2 / 1000
        let b = DisplayImage::constant(4, 4, 255.0 / 1000f64.sqrt());
        assert!((psnr(&a, &b, 255.0).unwrap().unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), None);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random(32, &mut rng);
        let noise: Vec<f64> = (0..base.pixels.len()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let mut last = f64::INFINITY;
        for level in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let noisy = DisplayImage::new(32, 32, base.pixels.iter().zip(&noise).map(|(p, n)| p + level * n).collect()).unwrap();
            let p = psnr(&base, &noisy, 255.0).unwrap().unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(16, &mut rng);
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expect = c1 / (255.0f64 * 255.0 + c1);
        let got = ssim(&DisplayImage::constant(16, 16, 0.0), &DisplayImage::constant(16, 16, 255.0), 255.0).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!(matches!(
            ssim(&random(10, &mut rng), &random(10, &mut rng), 255.0),
            Err(MetricsError::TooSmall { .. })
        ));
    }

    #[test]
    fn ssim_positive_for_related_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(24, &mut rng);
            let b = DisplayImage::new(24, 24, a.pixels.iter().map(|p| (p + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0)).collect()).unwrap();
            let s = ssim(&a, &b, 255.0).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>(), side in 11usize..20, scale in 1.0f64..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut arbitrary = || DisplayImage::new(side, side, (0..side * side).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
            let (a, b) = (arbitrary(), arbitrary());
            let s = ssim(&a, &b, 255.0).unwrap();
            prop_assert_eq!(s, ssim(&b, &a, 255.0).unwrap());
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
