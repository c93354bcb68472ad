//! PSNR and SSIM on the BT.601 luma channel, in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

/// Luma plane on the 8-bit scale from an RGB image `[3,H,W]` or `[1,3,H,W]`
/// with values clamped to `[0,1]`. Returns `(H, W, Y)`.
pub fn luma(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = match img.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => return Err(Error::shape("luma", format!("expected an RGB image, got {s:?}"))),
    };
    let d = img.data();
    let n = h * w;
    let y = (0..n)
        .map(|i| {
            let c = |k: usize| (d[k * n + i] as f64).clamp(0.0, 1.0);
            (0.299 * c(0) + 0.587 * c(1) + 0.114 * c(2)) * PEAK
        })
        .collect();
    Ok((h, w, y))
}

fn paired(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (h, w, a) = luma(pred)?;
    let (h2, w2, b) = luma(gt)?;
    if (h, w) != (h2, w2) {
        return Err(Error::shape("metrics", format!("{h}x{w} vs {h2}x{w2}")));
    }
    Ok((h, w, a, b))
}

/// `10 log10(255^2 / MSE)` on luma, capped at [`PSNR_CAP_DB`].
pub fn psnr_y(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, _, a, b) = paired(pred, gt)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
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

/// Mean single-scale SSIM over every valid 11x11 window position.
pub fn ssim_y(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w, a, b) = paired(pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim_y",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
        assert!((psnr_from_mse(1.0) - 48.1308).abs() < 1e-4);
        let white = Tensor::ones(&[3, 1, 1]);
        let black = Tensor::zeros(&[3, 1, 1]);
        assert!(psnr_y(&white, &black).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.windows(2).take(SSIM_WINDOW / 2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ssim_needs_a_full_window() {
        let x = Tensor::zeros(&[3, 8, 8]);
        assert!(ssim_y(&x, &x).is_err());
    }

    proptest! {
        #[test]
        fn ssim_of_identical_is_one(seed in 0u64..50) {
            use rand::SeedableRng;
            let x: Tensor = Tensor::rand_uniform(&[3, 12, 12], 0.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((ssim_y(&x, &x).unwrap() - 1.0).abs() < 1e-9);
            prop_assert_eq!(psnr_y(&x, &x).unwrap(), PSNR_CAP_DB);
        }
    }
}
