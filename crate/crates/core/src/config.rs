//! JSON run configuration shared by every CLI command.
//!
//! The schema is strict: unknown keys are rejected so a typo'd field fails
//! loudly instead of being silently ignored.

use crate::attack::PolicyKind;
use crate::error::{Error, Result};
use crate::quant::{Dtype, ScaleMode};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Outlier detection sensitivity.
    pub alpha: f64,
    /// Cap on reflectors per layer; `null` means ceil(0.01 * d).
    pub m_max: Option<usize>,
    /// Bit error rate for random fault injection.
    pub ber: f64,
    /// Monte Carlo trial count.
    pub trials: usize,
    /// Trial i uses seed base_seed + i.
    pub base_seed: u64,
    /// Greedy search budget.
    pub n_flips: usize,
    /// Failure when metric > max(failure_absolute, failure_relative * clean).
    pub failure_absolute: f64,
    pub failure_relative: f64,
    /// Storage dtype for generated/fused tensors.
    pub dtype: Dtype,
    pub scale_mode: ScaleMode,
    /// Re-quantize fused weights back into `dtype` (the stored-bit attack
    /// surface). When false, fused weights stay full precision.
    pub requantize_fused: bool,
    /// Layers excluded from protection.
    pub layer_opt_outs: Vec<usize>,
    /// Probe set used for the failure metric.
    pub probe_tokens: usize,
    pub probe_seed: u64,
    /// Calibration pass shape.
    pub calib_batches: usize,
    pub calib_tokens: usize,
    pub calib_seed: u64,
    /// Losslessness tolerance; `null` picks a context default (1e-9 in full
    /// precision, 2 * max(scale) * d_in after re-quantization).
    pub lossless_tol: Option<f64>,
    /// Greedy candidate policy and per-layer width.
    pub policy: PolicyKind,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 6.0,
            m_max: None,
            ber: 3e-4,
            trials: 500,
            base_seed: 1,
            n_flips: 50,
            failure_absolute: 100.0,
            failure_relative: 20.0,
            dtype: Dtype::Int8,
            scale_mode: ScaleMode::PerRow,
            requantize_fused: true,
            layer_opt_outs: Vec::new(),
            probe_tokens: 64,
            probe_seed: 777,
            calib_batches: 8,
            calib_tokens: 128,
            calib_seed: 4242,
            lossless_tol: None,
            policy: PolicyKind::TopMagnitude,
            top_k: 32,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ber) {
            return Err(Error::Config("ber must lie in [0, 1]".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.failure_absolute <= 0.0 || self.failure_relative <= 0.0 {
            return Err(Error::Config("failure rule constants must be > 0".into()));
        }
        if self.probe_tokens == 0 || self.calib_tokens == 0 || self.calib_batches == 0 {
            return Err(Error::Config("probe/calibration sizes must be >= 1".into()));
        }
        if let Some(tol) = self.lossless_tol {
            if tol <= 0.0 {
                return Err(Error::Config("lossless_tol must be > 0".into()));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}
