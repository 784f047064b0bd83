//! Full-reference metrics plus the no-reference underwater quality index.

use crate::error::{Error, Result};
use crate::loss::ssim_value;
use crate::tensor::Tensor4;

/// PSNR is capped here when the MSE is effectively zero.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, Default)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean squared error on the [0,255] scale for table comparability.
    pub mse: f64,
    pub uciqe: f64,
}

pub fn mse01(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "metric operands {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.numel() as f64)
}

pub fn psnr(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let mse = mse01(a, b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Index-rounded quantile on a sorted copy.
fn quantile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let idx = ((values.len() - 1) as f64 * p).round() as usize;
    values[idx]
}

/// UCIQE = 0.4680 * sigma_chroma + 0.2745 * contrast_luma + 0.2576 * mean_saturation.
///
/// Conversion used here, per pixel on [0,1] RGB:
///   luma       = 0.299 R + 0.587 G + 0.114 B      (Rec.601)
///   chroma     = max(R,G,B) - min(R,G,B)
///   saturation = chroma / max(R,G,B), zero for black pixels
/// with sigma_chroma the population standard deviation of chroma and
/// contrast_luma the difference between the 99th and 1st luma percentiles.
pub fn uciqe(img: &Tensor4) -> Result<f64> {
    let [n, c, h, w] = img.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "uciqe expects (1,3,H,W), found {:?}",
            img.dims()
        )));
    }
    let count = h * w;
    let mut luma = Vec::with_capacity(count);
    let mut chroma = Vec::with_capacity(count);
    let mut sat_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let r = img.at(0, 0, y, x);
            let g = img.at(0, 1, y, x);
            let b = img.at(0, 2, y, x);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            luma.push(0.299 * r + 0.587 * g + 0.114 * b);
            chroma.push(max - min);
            sat_sum += if max > 0.0 { (max - min) / max } else { 0.0 };
        }
    }
    let mean_c = chroma.iter().sum::<f64>() / count as f64;
    let var_c = chroma.iter().map(|v| (v - mean_c) * (v - mean_c)).sum::<f64>() / count as f64;
    let contrast = quantile(&mut luma.clone(), 0.99) - quantile(&mut luma, 0.01);
    Ok(0.4680 * var_c.sqrt() + 0.2745 * contrast + 0.2576 * sat_sum / count as f64)
}

/// The full-reference bundle reported by evaluation.
pub fn metrics(prediction: &Tensor4, reference: &Tensor4) -> Result<Metrics> {
    let mse = mse01(prediction, reference)?;
    Ok(Metrics {
        psnr: psnr(prediction, reference)?,
        ssim: ssim_value(prediction, reference)?,
        mse: mse * 255.0 * 255.0,
        uciqe: uciqe(prediction)?,
    })
}
