//! Frame-level image metrics.

use scar_world::Frame;
use serde::Serialize;

use crate::error::EvalError;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "MSE")]
    pub mse: f64,
    #[serde(rename = "SSIM-L")]
    pub ssim_l: f64,
}

/// SSIM from whole-frame means, variances and covariance, unit dynamic range.
pub fn ssim_global(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Metrics over paired predicted and true frames (the future segment).
pub fn image_metrics(pred: &[Frame], truth: &[Frame]) -> Result<MetricRow, EvalError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::SizeMismatch(format!("{} predicted vs {} true frames", pred.len(), truth.len())));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    let mut ssim = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.pixels.len() != t.pixels.len() {
            return Err(EvalError::SizeMismatch(format!("{} vs {} pixels", p.pixels.len(), t.pixels.len())));
        }
        se += p.pixels.iter().zip(&t.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.pixels.len();
        ssim += ssim_global(&p.pixels, &t.pixels);
    }
    let mse = se / count as f64;
    let last = pred.len() - 1;
    Ok(MetricRow {
        ssim: ssim / pred.len() as f64,
        psnr: psnr(mse),
        mse,
        ssim_l: ssim_global(&pred[last].pixels, &truth[last].pixels),
    })
}

pub fn mean_row(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    let s = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricRow {
        ssim: s(|r| r.ssim),
        psnr: s(|r| r.psnr),
        mse: s(|r| r.mse),
        ssim_l: s(|r| r.ssim_l),
    }
}
