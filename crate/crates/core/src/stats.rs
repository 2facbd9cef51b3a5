//! Calibration-time channel statistics and the composite outlier threshold.
//!
//! A channel is an outlier when its L∞ peak exceeds
//! `tau = max(mu + alpha * sigma, 2 * mu, 1.0)`. The statistical term catches
//! extreme spikes, the relative term catches channels that dominate a quiet
//! layer, and the absolute floor of 1.0 filters inactive layers out entirely.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Per-channel calibration statistics for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Per-channel L∞ magnitudes over the calibration activations.
    pub peaks: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the peaks.
    pub stddev: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Flagged channels, ascending. `calibrate` may truncate this to the
    /// `m_max` largest peaks; straight out of `compute_threshold` it is
    /// exactly `{ j : peaks[j] > tau }`.
    pub outliers: Vec<usize>,
}

/// Per-channel L∞ over rows: `peaks[j] = max_i |x[i][j]|`.
pub fn channel_linf(x: &Matrix) -> Result<Vec<f64>> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::InvalidArgument(
            "channel_linf requires a nonempty matrix".into(),
        ));
    }
    let mut peaks = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (peak, &v) in peaks.iter_mut().zip(x.row(i)) {
            let a = v.abs();
            if a > *peak {
                *peak = a;
            }
        }
    }
    Ok(peaks)
}

/// Fill mean, population stddev, the composite threshold and the flagged set.
/// Ties (`peaks[j] == tau`) are not flagged.
pub fn compute_threshold(peaks: &[f64], alpha: f64) -> Result<ChannelStats> {
    if peaks.is_empty() {
        return Err(Error::InvalidArgument("empty peaks vector".into()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument("alpha must be >= 0".into()));
    }
    let n = peaks.len() as f64;
    let mean = peaks.iter().sum::<f64>() / n;
    let var = peaks.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let stddev = var.sqrt();
    let tau = (mean + alpha * stddev).max(2.0 * mean).max(1.0);
    let outliers = peaks
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tau)
        .map(|(j, _)| j)
        .collect();
    Ok(ChannelStats {
        peaks: peaks.to_vec(),
        mean,
        stddev,
        alpha,
        tau,
        outliers,
    })
}

/// Worst-case single-element output perturbation:
/// `max_i |dy_{i,k}| = |dw| * peaks[j]` for a weight change `dw` at row `j`.
pub fn amplification_bound(delta_w: f64, peaks: &[f64], j: usize) -> Result<f64> {
    if j >= peaks.len() {
        return Err(Error::OutOfBounds {
            what: "channel",
            index: j,
            bound: peaks.len(),
        });
    }
    Ok(delta_w.abs() * peaks[j])
}
