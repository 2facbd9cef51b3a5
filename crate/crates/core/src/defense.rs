//! The four-phase rotation defense: calibrate, build the compact-WY rotation,
//! fuse the inverse rotation into the weights offline, correct activations
//! online.
//!
//! Fusion always runs in full precision; re-quantization of the fused tensor
//! is optional and isolated behind `requantize_fused`, because it is the one
//! step that trades exact losslessness for a stored-bit attack surface.

use crate::error::{Error, Result};
use crate::linalg::{
    apply_wy_right, apply_wy_transpose_left, householder_from_outlier, wy_append, CompactWY,
    Matrix,
};
use crate::quant::{dequantize, quantize, Dtype, QuantizedTensor, ScaleMode};
use crate::stats::{channel_linf, compute_threshold, ChannelStats};

#[derive(Debug, Clone)]
pub struct DefenseConfig {
    /// Outlier sensitivity of the composite threshold.
    pub alpha: f64,
    /// Cap on reflectors per layer; `None` resolves to ceil(0.01 * d).
    pub m_max: Option<usize>,
    /// Relative ∞-norm tolerance for losslessness checks.
    pub lossless_tol: f64,
    /// Re-quantize fused weights with freshly computed scales.
    pub requantize_fused: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            alpha: 6.0,
            m_max: None,
            lossless_tol: 1e-9,
            requantize_fused: false,
        }
    }
}

impl DefenseConfig {
    pub fn resolved_m_max(&self, d: usize) -> usize {
        self.m_max
            .unwrap_or_else(|| ((0.01 * d as f64).ceil() as usize).max(1))
    }
}

/// Fused weights: full precision, or re-quantized stored words.
#[derive(Debug, Clone)]
pub enum FusedWeights {
    Full(Matrix),
    Quantized(QuantizedTensor),
}

impl FusedWeights {
    pub fn rows(&self) -> usize {
        match self {
            FusedWeights::Full(m) => m.rows(),
            FusedWeights::Quantized(q) => q.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            FusedWeights::Full(m) => m.cols(),
            FusedWeights::Quantized(q) => q.cols(),
        }
    }

    /// Real-valued view of the stored weights.
    pub fn to_matrix(&self) -> Matrix {
        match self {
            FusedWeights::Full(m) => m.clone(),
            FusedWeights::Quantized(q) => dequantize(q),
        }
    }
}

/// Quantization parameters of the layer before fusion.
#[derive(Debug, Clone)]
pub struct OriginalQuantInfo {
    pub dtype: Option<Dtype>,
    pub scale_mode: ScaleMode,
    pub scales: Vec<f32>,
    pub zero_point: i32,
}

impl OriginalQuantInfo {
    pub fn full_precision() -> Self {
        OriginalQuantInfo {
            dtype: None,
            scale_mode: ScaleMode::PerTensor,
            scales: vec![1.0],
            zero_point: 0,
        }
    }

    pub fn of(q: &QuantizedTensor) -> Self {
        OriginalQuantInfo {
            dtype: Some(q.dtype()),
            scale_mode: q.scale_mode(),
            scales: q.scales().to_vec(),
            zero_point: q.zero_point(),
        }
    }
}

/// A layer with its rotation absorbed into the stored weights.
#[derive(Debug, Clone)]
pub struct ProtectedLayer {
    pub layer_id: usize,
    pub fused: FusedWeights,
    pub wy: CompactWY,
    pub original: OriginalQuantInfo,
}

impl ProtectedLayer {
    /// Baseline layer wrapped without any rotation (m = 0); the fused
    /// tensor is the original, bit for bit.
    pub fn unprotected(layer_id: usize, q: &QuantizedTensor) -> Self {
        ProtectedLayer {
            layer_id,
            fused: FusedWeights::Quantized(q.clone()),
            wy: CompactWY::empty(q.rows()),
            original: OriginalQuantInfo::of(q),
        }
    }

    pub fn flop_overhead(&self, batch: usize) -> f64 {
        flop_overhead(self.fused.rows(), self.fused.cols(), self.wy.m(), batch)
    }
}

/// Phase 1: per-layer channel statistics. `None` entries mean the caller had
/// no activations for that layer, which is an error naming the layer. When a
/// layer is oversubscribed the `m_max` largest peaks are kept.
pub fn calibrate(layer_inputs: &[Option<Matrix>], cfg: &DefenseConfig) -> Result<Vec<ChannelStats>> {
    let mut out = Vec::with_capacity(layer_inputs.len());
    for (layer, input) in layer_inputs.iter().enumerate() {
        let x = input
            .as_ref()
            .ok_or(Error::MissingCalibration { layer })?;
        out.push(calibrate_layer(x, cfg)?);
    }
    Ok(out)
}

/// Single-layer calibration with `m_max` truncation.
pub fn calibrate_layer(x: &Matrix, cfg: &DefenseConfig) -> Result<ChannelStats> {
    let peaks = channel_linf(x)?;
    let mut stats = compute_threshold(&peaks, cfg.alpha)?;
    let m_max = cfg.resolved_m_max(x.cols());
    if stats.outliers.len() > m_max {
        let mut by_peak = stats.outliers.clone();
        // keep the largest peaks; ties resolved toward lower channel index
        by_peak.sort_by(|&a, &b| {
            stats.peaks[b]
                .partial_cmp(&stats.peaks[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        by_peak.truncate(m_max);
        by_peak.sort_unstable();
        stats.outliers = by_peak;
    }
    Ok(stats)
}

/// Phase 2: one reflector per flagged channel, appended in ascending
/// channel order.
pub fn build_rotation(stats: &ChannelStats) -> Result<CompactWY> {
    let d = stats.peaks.len();
    let mut wy = CompactWY::empty(d);
    for &k in &stats.outliers {
        if k >= d {
            return Err(Error::OutOfBounds {
                what: "outlier channel",
                index: k,
                bound: d,
            });
        }
        wy = wy_append(&wy, &householder_from_outlier(d, k)?)?;
    }
    Ok(wy)
}

/// Phase 3 on full-precision weights: `W~ = Q^T W`, optionally re-quantized.
pub fn fuse_weights(
    w: &Matrix,
    wy: CompactWY,
    cfg: &DefenseConfig,
    layer_id: usize,
) -> Result<ProtectedLayer> {
    if w.rows() != wy.dim() {
        return Err(Error::DimensionMismatch {
            op: "fuse_weights",
            expected: format!("{} rows", wy.dim()),
            got: format!("{}", w.rows()),
        });
    }
    let fused_full = apply_wy_transpose_left(w, &wy)?;
    let fused = if cfg.requantize_fused {
        FusedWeights::Quantized(quantize(&fused_full, ScaleMode::PerRow, Dtype::Int8))
    } else {
        FusedWeights::Full(fused_full)
    };
    Ok(ProtectedLayer {
        layer_id,
        fused,
        wy,
        original: OriginalQuantInfo::full_precision(),
    })
}

/// Phase 3 on a quantized layer. Fusion happens on the dequantized weights in
/// full precision; with `requantize_fused` the result is re-quantized with
/// fresh scales in the original dtype and scale mode. An empty rotation keeps
/// the original stored words bit-exactly.
pub fn fuse_quantized(
    q: &QuantizedTensor,
    wy: CompactWY,
    cfg: &DefenseConfig,
    layer_id: usize,
) -> Result<ProtectedLayer> {
    if q.rows() != wy.dim() {
        return Err(Error::DimensionMismatch {
            op: "fuse_quantized",
            expected: format!("{} rows", wy.dim()),
            got: format!("{}", q.rows()),
        });
    }
    let original = OriginalQuantInfo::of(q);
    if wy.m() == 0 {
        return Ok(ProtectedLayer {
            layer_id,
            fused: FusedWeights::Quantized(q.clone()),
            wy,
            original,
        });
    }
    let fused_full = apply_wy_transpose_left(&dequantize(q), &wy)?;
    let fused = if cfg.requantize_fused {
        FusedWeights::Quantized(quantize(&fused_full, q.scale_mode(), q.dtype()))
    } else {
        FusedWeights::Full(fused_full)
    };
    Ok(ProtectedLayer {
        layer_id,
        fused,
        wy,
        original,
    })
}

/// Phase 4: `Y = (X Q) W~` with the low-rank activation correction.
pub fn protected_forward(x: &Matrix, layer: &ProtectedLayer) -> Result<Matrix> {
    if x.cols() != layer.wy.dim() {
        return Err(Error::DimensionMismatch {
            op: "protected_forward",
            expected: format!("{} cols", layer.wy.dim()),
            got: format!("{}", x.cols()),
        });
    }
    let rotated = apply_wy_right(x, &layer.wy)?;
    rotated.matmul(&layer.fused.to_matrix())
}

/// Losslessness check result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LosslessReport {
    pub max_rel_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compare protected output against the baseline `X W` on a probe batch.
/// Deviation is relative: `||Y_p - Y_b||_inf / (1 + ||Y_b||_inf)`.
pub fn verify_lossless(
    original_w: &Matrix,
    layer: &ProtectedLayer,
    probe: &Matrix,
    tol: f64,
) -> Result<LosslessReport> {
    let baseline = probe.matmul(original_w)?;
    let protected = protected_forward(probe, layer)?;
    let dev = protected.sub(&baseline)?.max_abs() / (1.0 + baseline.max_abs());
    Ok(LosslessReport {
        max_rel_dev: dev,
        tol,
        pass: dev <= tol,
    })
}

/// Analytical correction/GEMM FLOP ratio:
/// `(2 B d m + 2 B m^2 + 2 B m d) / (2 B d d_out)`.
pub fn flop_overhead(d_in: usize, d_out: usize, m: usize, batch: usize) -> f64 {
    if d_in == 0 || d_out == 0 {
        return 0.0;
    }
    let b = batch.max(1) as f64;
    let (d_in_f, d_out_f, m_f) = (d_in as f64, d_out as f64, m as f64);
    let correction = 2.0 * b * d_in_f * m_f + 2.0 * b * m_f * m_f + 2.0 * b * m_f * d_in_f;
    let gemm = 2.0 * b * d_in_f * d_out_f;
    correction / gemm
}
