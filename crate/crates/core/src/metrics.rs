//! Reference image quality metrics: PSNR over RGB MSE and luma SSIM with the
//! standard 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, L=255).

use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// PSNR value reported for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub path: Option<String>,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_dims<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels.len() as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64_() - y.to_f64_();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// 10*log10(255^2 / MSE), capped at [`PSNR_CAP_DB`] for identical images.
pub fn psnr<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean local SSIM on luma, valid windows only.
pub fn ssim<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    check_dims(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} smaller than {}x{} SSIM window",
            a.height(),
            a.width(),
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    let la = a.luma().mapv(|v| v.to_f64_());
    let lb = b.luma().mapv(|v| v.to_f64_());
    Ok(ssim_luma(&la, &lb))
}

fn ssim_luma(la: &Array2<f64>, lb: &Array2<f64>) -> f64 {
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let (h, w) = (la.shape()[0], la.shape()[1]);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut acc = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wgt = kernel[i] * kernel[j];
                    let x = la[[r + i, c + j]];
                    let y = lb[[r + i, c + j]];
                    mu_a += wgt * x;
                    mu_b += wgt * y;
                    aa += wgt * x * x;
                    bb += wgt * y * y;
                    ab += wgt * x * y;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
    }
    acc / (oh * ow) as f64
}
