//! PSNR, SSIM and the brightness-corrected PSNR*.

use super::{luma, ImageTensor};
use crate::error::{Error, Result};

/// PSNR is reported as this value whenever the MSE falls below [`MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    b.tensor().expect_shape(op, a.tensor().shape())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// Peak 1.0.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR after rescaling `en` so its mean luma matches `gt`. The rescaled
/// image is clamped to `[0, 1]` before scoring.
pub fn psnr_star(en: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    same_shape("psnr_star", en, gt)?;
    let mean_en = luma(en)?.tensor().mean();
    if !(mean_en > 0.0) {
        return Err(Error::DegenerateBrightness);
    }
    let ratio = luma(gt)?.tensor().mean() / mean_en;
    let rescaled = ImageTensor::new(en.tensor().map(|v| (v * ratio).clamp(0.0, 1.0)))?;
    psnr(&rescaled, gt)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a single `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows (σ = 1.5),
/// computed per channel and averaged across channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = |img: &ImageTensor, ch: usize| -> Vec<f64> { img.data().iter().skip(ch).step_by(c).copied().collect() };
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), h, w, &taps))
        .sum();
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_| rng.random()).unwrap()
    }

    #[test]
    fn psnr_cap_and_analytic_value() {
        let a = random_image(8, 8, 3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let base = ImageTensor::filled(8, 8, 3, 0.3).unwrap();
        let shifted = ImageTensor::filled(8, 8, 3, 0.4).unwrap();
        assert!((psnr(&base, &shifted).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&random_image(8, 8, 3, 1), &random_image(8, 9, 3, 1)).is_err());
    }

    #[test]
    fn psnr_star_ratio_cancels() {
        let gt = random_image(12, 12, 3, 2).scaled(0.5);
        let en = gt.scaled(0.5);
        assert_eq!(psnr_star(&en, &gt).unwrap(), PSNR_CAP_DB);
        let noisy = random_image(12, 12, 3, 3);
        assert_ne!(psnr_star(&noisy, &gt).unwrap(), psnr(&noisy, &gt).unwrap());
        assert_eq!(psnr_star(&gt, &gt).unwrap(), psnr(&gt, &gt).unwrap());
    }

    #[test]
    fn psnr_star_black_prediction_is_degenerate() {
        let gt = random_image(8, 8, 3, 4);
        let black = ImageTensor::filled(8, 8, 3, 0.0).unwrap();
        assert!(matches!(psnr_star(&black, &gt), Err(Error::DegenerateBrightness)));
    }

    #[test]
    fn ssim_identity_and_constant_patches() {
        let a = random_image(16, 20, 3, 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        let zero = ImageTensor::filled(16, 16, 1, 0.0).unwrap();
        let one = ImageTensor::filled(16, 16, 1, 1.0).unwrap();
        let (c1, c2) = (1e-4, 9e-4);
        // constant patches: mu_a = 0, mu_b = 1, all variances zero
        let want = ((2.0 * 0.0 * 1.0 + c1) * (2.0 * 0.0 + c2)) / ((0.0 + 1.0 + c1) * (0.0 + 0.0 + c2));
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_too_small_is_error() {
        let a = ImageTensor::new(Tensor::zeros(&[10, 30, 1])).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(w[i], w[10 - i]);
        }
    }
}
