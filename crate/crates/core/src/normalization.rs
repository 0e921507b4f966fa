//! Per-window, per-channel instance normalization with stored statistics.

use crate::error::{Error, Result};
use crate::series::TimeSeriesBatch;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Mean and scale for each `(batch, channel)` series, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(batch: usize, channels: usize) -> Self {
        NormStats {
            batch,
            channels,
            mean: vec![0.0; batch * channels],
            std: vec![1.0; batch * channels],
        }
    }
}

/// Normalizes one series in place and returns its `(mean, std)`, where
/// `std = sqrt(population variance + eps)`.
pub fn normalize_series(x: &mut [f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = (var + eps).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / std;
    }
    (mean, std)
}

pub fn normalize(x: &TimeSeriesBatch, eps: f64) -> Result<(TimeSeriesBatch, NormStats)> {
    let (b, c, l) = x.shape();
    if l < 2 {
        return Err(Error::invalid(format!(
            "normalization needs at least 2 steps, got {l}"
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::invalid(format!("eps must be non-negative, got {eps}")));
    }
    let mut out = x.clone();
    let mut stats = NormStats::identity(b, c);
    for bi in 0..b {
        for ci in 0..c {
            let (m, s) = normalize_series(out.series_mut(bi, ci), eps);
            stats.mean[bi * c + ci] = m;
            stats.std[bi * c + ci] = s;
        }
    }
    Ok((out, stats))
}

/// `y * std + mean`, broadcast along time. `y` may be longer than the window
/// the statistics came from.
pub fn denormalize(y: &TimeSeriesBatch, stats: &NormStats) -> Result<TimeSeriesBatch> {
    let (b, c, _) = y.shape();
    if (b, c) != (stats.batch, stats.channels)
        || stats.mean.len() != b * c
        || stats.std.len() != b * c
    {
        return Err(Error::invalid(format!(
            "stats for ({}, {}) do not match batch shape ({b}, {c})",
            stats.batch, stats.channels
        )));
    }
    let mut out = y.clone();
    for bi in 0..b {
        for ci in 0..c {
            let (m, s) = (stats.mean[bi * c + ci], stats.std[bi * c + ci]);
            out.series_mut(bi, ci).iter_mut().for_each(|v| *v = *v * s + m);
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the raw series `x`, given its
/// gradient with respect to `normalize_series(x)`. Mean and std are treated
/// as functions of `x`.
pub fn normalize_series_vjp(x: &[f64], eps: f64, grad_out: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let (_, std) = normalize_series(&mut y, eps);
    let n = x.len() as f64;
    let g_mean = grad_out.iter().sum::<f64>() / n;
    let gy_mean = grad_out.iter().zip(&y).map(|(g, y)| g * y).sum::<f64>() / n;
    grad_out
        .iter()
        .zip(&y)
        .map(|(g, yv)| (g - g_mean - yv * gy_mean) / std)
        .collect()
}
