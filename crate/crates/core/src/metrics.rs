//! Forecast quality metrics: MSE, RFNE, PSNR, SSIM and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for (numerically) identical inputs.
pub const PSNR_CAP: f64 = 200.0;
/// Side of the square SSIM window on 2D fields.
pub const SSIM_WINDOW: usize = 8;
/// Data range of fields normalized to `[-1, 1]`.
pub const NORMALIZED_RANGE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub rfne: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when either input has zero variance.
    pub pearson: Option<f64>,
}

impl MetricSet {
    /// Arithmetic mean over a batch of metric sets (e.g. samples and ensemble members).
    pub fn mean(sets: &[MetricSet]) -> Result<MetricSet> {
        if sets.is_empty() {
            return Err(Error::Empty("metric sets"));
        }
        let n = sets.len() as f64;
        let avg = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        let pearson = sets
            .iter()
            .map(|s| s.pearson)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(MetricSet {
            mse: avg(|s| s.mse),
            rfne: avg(|s| s.rfne),
            psnr: avg(|s| s.psnr),
            ssim: avg(|s| s.ssim),
            pearson,
        })
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if data_range > 0.0 && data_range.is_finite() {
        Ok(())
    } else {
        Err(Error::param("data_range", "must be > 0"))
    }
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rfne(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let denom = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("rfne: truth has zero norm"));
    }
    let num = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

pub fn psnr(pred: &[f64], truth: &[f64], data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let err = mse(pred, truth)?;
    let peak = data_range * data_range;
    if err < peak * 1e-20 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak / err).log10()).min(PSNR_CAP))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    // Rounding in the mean would give a constant input a tiny nonzero spread.
    if is_constant(pred) || is_constant(truth) {
        return Err(Error::Degenerate("pearson: zero-variance input"));
    }
    let n = pred.len() as f64;
    let ma = pred.iter().sum::<f64>() / n;
    let mb = truth.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(truth) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("pearson: zero-variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// SSIM of one window given population statistics.
fn ssim_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, data_range: f64) -> f64 {
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn window_ssim<I: Iterator<Item = (f64, f64)> + Clone>(it: I, data_range: f64) -> f64 {
    let n = it.clone().count() as f64;
    let (sx, sy) = it.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (x, y) in it {
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
        cxy += (x - mx) * (y - my);
    }
    ssim_stats(mx, my, vx / n, vy / n, cxy / n, data_range)
}

/// SSIM with 8x8 uniform sliding windows on a `rows x cols` field, or a
/// single global window when `shape` is `None` or the field is smaller than a window.
pub fn ssim(
    pred: &[f64],
    truth: &[f64],
    data_range: f64,
    shape: Option<(usize, usize)>,
) -> Result<f64> {
    check_pair(pred, truth)?;
    check_range(data_range)?;
    let Some((rows, cols)) = shape else {
        return Ok(window_ssim(pred.iter().copied().zip(truth.iter().copied()), data_range));
    };
    if rows * cols != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: pred.len(),
        });
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Ok(window_ssim(pred.iter().copied().zip(truth.iter().copied()), data_range));
    }
    let w = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let it = (r0..r0 + w)
                .flat_map(move |r| (c0..c0 + w).map(move |c| r * cols + c))
                .map(|i| (pred[i], truth[i]));
            total += window_ssim(it, data_range);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// All five metrics. Zero-variance inputs leave `pearson` empty instead of failing.
pub fn compute(
    pred: &[f64],
    truth: &[f64],
    data_range: f64,
    shape: Option<(usize, usize)>,
) -> Result<MetricSet> {
    let pearson = match pearson(pred, truth) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricSet {
        mse: mse(pred, truth)?,
        rfne: rfne(pred, truth)?,
        psnr: psnr(pred, truth, data_range)?,
        ssim: ssim(pred, truth, data_range, shape)?,
        pearson,
    })
}
