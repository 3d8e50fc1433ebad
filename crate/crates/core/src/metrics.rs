//! Error metrics between generated and ground-truth grids, plus the
//! RV-coefficient used to quantify cross-scale similarity.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, SpatioTemporalGrid};

/// Value returned by [`psnr`] when the two grids are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub fn mae(pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid) -> Result<f64> {
    ensure_same_shape(&pred.data, &truth.data)?;
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .data
        .iter()
        .zip(truth.data.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n)
}

pub fn mse(pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid) -> Result<f64> {
    ensure_same_shape(&pred.data, &truth.data)?;
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .data
        .iter()
        .zip(truth.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

pub fn rmse(pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid) -> Result<f64> {
    Ok(mse(pred, truth)?.sqrt())
}

/// RMSE between the time-mean maps of both grids.
pub fn sp_rmse(pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid) -> Result<f64> {
    ensure_same_shape(&pred.data, &truth.data)?;
    let (a, b) = (pred.time_mean(), truth.time_mean());
    let n = a.len().max(1) as f64;
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / n).sqrt())
}

/// Peak signal-to-noise ratio in dB for peak value `peak`.
///
/// Returns [`PSNR_IDENTICAL`] (positive infinity) when the MSE is exactly zero.
pub fn psnr(pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(pred, truth)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// RV-coefficient between two matrices sharing a row count.
///
/// Uses the identity `tr(A Aᵀ B Bᵀ) = ‖Aᵀ B‖²` so only column-space Gram
/// matrices are formed, which keeps wide time-flattened inputs cheap.
pub fn rv_coefficient(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let cross = a.t().dot(&b);
    let num: f64 = cross.iter().map(|v| v * v).sum();
    let ga = frob(&a.t().dot(&a));
    let gb = frob(&b.t().dot(&b));
    if ga == 0.0 {
        return Err(Error::UndefinedCoefficient(1));
    }
    if gb == 0.0 {
        return Err(Error::UndefinedCoefficient(2));
    }
    Ok((num / (ga * gb)).clamp(0.0, 1.0))
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
