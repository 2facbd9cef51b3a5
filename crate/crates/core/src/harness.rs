//! Deterministic toy multi-layer model with plantable outlier channels, the
//! self-referential failure metric, and the Monte Carlo loop.
//!
//! The model is a stack of quantized linear layers with a silu gate between
//! them. Outliers are planted on the incoming signal path of a chosen layer
//! input channel: for layer 0 that is the input sampler's per-channel scale,
//! for layer l >= 1 it is column c of the previous weight matrix. The damage
//! metric is `exp(mean_i ||y_i - ref_i||^2)` against the same image's own
//! clean outputs, so a clean model scores exactly 1.0 and the failure rule
//! `metric > max(100, 20 * clean)` mirrors a perplexity blow-up.

use crate::attack::{
    greedy_bit_search, random_ber_attack, AttackOutcome, CandidatePolicy, FailureRule,
    GreedySearch,
};
use crate::defense::{
    build_rotation, calibrate_layer, fuse_quantized, DefenseConfig, ProtectedLayer,
};
use crate::error::{Error, Result};
use crate::linalg::{apply_wy_right, CompactWY, Matrix};
use crate::quant::{dequantize, quantize, Dtype, QuantizedTensor, ScaleMode};
use crate::stats::{channel_linf, ChannelStats};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One planted activation outlier: scale `channel`'s incoming signal path
/// into layer `layer` by `magnitude`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub layer: usize,
    pub channel: usize,
    pub magnitude: f64,
}

/// x * sigmoid(x), the smooth gate between layers.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Weight image plus optional per-layer rotations; both the baseline and the
/// protected model forward through this.
#[derive(Debug, Clone)]
pub struct ModelImage {
    pub tensors: Vec<QuantizedTensor>,
    /// `None` entries are unrotated layers.
    pub rotations: Vec<Option<CompactWY>>,
}

impl ModelImage {
    pub fn baseline(tensors: Vec<QuantizedTensor>) -> Self {
        let rotations = vec![None; tensors.len()];
        ModelImage { tensors, rotations }
    }

    pub fn from_layers(layers: Vec<ProtectedLayer>) -> Result<Self> {
        let mut tensors = Vec::with_capacity(layers.len());
        let mut rotations = Vec::with_capacity(layers.len());
        for layer in layers {
            match layer.fused {
                crate::defense::FusedWeights::Quantized(q) => tensors.push(q),
                crate::defense::FusedWeights::Full(_) => {
                    return Err(Error::InvalidArgument(
                        "model image needs stored (quantized) fused weights".into(),
                    ))
                }
            }
            rotations.push(if layer.wy.m() > 0 { Some(layer.wy) } else { None });
        }
        Ok(ModelImage { tensors, rotations })
    }

    pub fn n_layers(&self) -> usize {
        self.tensors.len()
    }

    pub fn d_in(&self) -> usize {
        self.tensors.first().map_or(0, |t| t.rows())
    }

    /// Forward through all layers with the silu gate between them (not after
    /// the last). Rotated layers apply the low-rank correction first.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with_tensors(&self.tensors, x)
    }

    /// Forward using substitute tensors (e.g. a faulted copy) but this
    /// image's rotations.
    pub fn forward_with_tensors(&self, tensors: &[QuantizedTensor], x: &Matrix) -> Result<Matrix> {
        let last = tensors.len() - 1;
        let mut a = x.clone();
        for (i, t) in tensors.iter().enumerate() {
            if let Some(wy) = &self.rotations[i] {
                a = apply_wy_right(&a, wy)?;
            }
            let h = a.matmul(&dequantize(t))?;
            a = if i < last {
                let mut gated = h;
                for v in 0..gated.rows() {
                    for c in 0..gated.cols() {
                        gated.set(v, c, silu(gated.get(v, c)));
                    }
                }
                gated
            } else {
                h
            };
        }
        Ok(a)
    }

    /// Per-layer input activations for a probe batch (calibration and the
    /// activation-weighted attack policy).
    pub fn collect_layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let last = self.tensors.len() - 1;
        let mut inputs = Vec::with_capacity(self.tensors.len());
        let mut a = x.clone();
        for (i, t) in self.tensors.iter().enumerate() {
            inputs.push(a.clone());
            if let Some(wy) = &self.rotations[i] {
                a = apply_wy_right(&a, wy)?;
            }
            let h = a.matmul(&dequantize(t))?;
            a = if i < last {
                let mut gated = h;
                for v in 0..gated.rows() {
                    for c in 0..gated.cols() {
                        gated.set(v, c, silu(gated.get(v, c)));
                    }
                }
                gated
            } else {
                h
            };
        }
        Ok(inputs)
    }
}

/// Deterministic toy model: full-precision weights plus their quantized
/// baseline image.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub planted: Vec<OutlierSpec>,
    /// Per-channel input scaling realizing layer-0 plants.
    pub input_scale: Vec<f64>,
    pub weights: Vec<Matrix>,
    pub image: ModelImage,
    pub dtype: Dtype,
    pub scale_mode: ScaleMode,
}

/// Build the toy model: weights are seeded standard normal scaled by
/// 1/sqrt(d_in); plants scale either the input sampler (layer 0) or column
/// `channel` of the previous weight matrix (layer >= 1).
pub fn build_toy_model(
    dims: &[usize],
    seed: u64,
    planted: &[OutlierSpec],
    dtype: Dtype,
    scale_mode: ScaleMode,
) -> Result<ToyModel> {
    if dims.len() < 3 {
        return Err(Error::InvalidArgument(
            "need at least 2 layers (3 dims)".into(),
        ));
    }
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument("all dims must be >= 8".into()));
    }
    let n_layers = dims.len() - 1;
    for spec in planted {
        if spec.layer >= n_layers {
            return Err(Error::OutOfBounds {
                what: "planted layer",
                index: spec.layer,
                bound: n_layers,
            });
        }
        if spec.channel >= dims[spec.layer] {
            return Err(Error::OutOfBounds {
                what: "planted channel",
                index: spec.channel,
                bound: dims[spec.layer],
            });
        }
        if spec.magnitude <= 0.0 {
            return Err(Error::InvalidArgument("plant magnitude must be > 0".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (rows, cols) = (dims[l], dims[l + 1]);
        let scale = 1.0 / (rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        weights.push(Matrix::from_vec(rows, cols, data)?);
    }
    let mut input_scale = vec![1.0; dims[0]];
    for spec in planted {
        if spec.layer == 0 {
            input_scale[spec.channel] *= spec.magnitude;
        } else {
            // scale the incoming weight column feeding that channel
            let w = &mut weights[spec.layer - 1];
            for r in 0..w.rows() {
                w.set(r, spec.channel, w.get(r, spec.channel) * spec.magnitude);
            }
        }
    }
    let tensors = weights
        .iter()
        .map(|w| quantize(w, scale_mode, dtype))
        .collect();
    Ok(ToyModel {
        dims: dims.to_vec(),
        seed,
        planted: planted.to_vec(),
        input_scale,
        weights,
        image: ModelImage::baseline(tensors),
        dtype,
        scale_mode,
    })
}

impl ToyModel {
    /// Seeded standard-normal inputs with the planted per-channel scaling.
    pub fn sample_inputs(&self, tokens: usize, seed: u64) -> Matrix {
        sample_inputs(&self.input_scale, tokens, seed)
    }
}

/// Seeded input sampler shared by the model and the CLI.
pub fn sample_inputs(input_scale: &[f64], tokens: usize, seed: u64) -> Matrix {
    let d = input_scale.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(tokens, d);
    for i in 0..tokens {
        for (j, &s) in input_scale.iter().enumerate() {
            m.set(i, j, rng.sample::<f64, _>(StandardNormal) * s);
        }
    }
    m
}

/// Held-out probe inputs plus the clean model's own outputs on them.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub inputs: Matrix,
    pub reference: Matrix,
}

/// Build the probe set; the reference is this image's clean forward, so the
/// clean metric is exactly 1.0 by construction.
pub fn make_eval_set(image: &ModelImage, input_scale: &[f64], tokens: usize, seed: u64) -> Result<EvalSet> {
    let inputs = sample_inputs(input_scale, tokens, seed);
    let reference = image.forward(&inputs)?;
    Ok(EvalSet { inputs, reference })
}

/// `exp(mean_i ||y_i - ref_i||^2)`. Non-finite outputs map to +inf, which the
/// failure rule counts as a failed trial.
pub fn proxy_metric(image: &ModelImage, tensors: &[QuantizedTensor], eval: &EvalSet) -> f64 {
    let y = match image.forward_with_tensors(tensors, &eval.inputs) {
        Ok(y) => y,
        Err(_) => return f64::INFINITY,
    };
    let n = eval.inputs.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row_sq = 0.0;
        for c in 0..y.cols() {
            let d = y.get(i, c) - eval.reference.get(i, c);
            row_sq += d * d;
        }
        acc += row_sq;
    }
    let mse = acc / n as f64;
    if !mse.is_finite() {
        return f64::INFINITY;
    }
    let metric = mse.exp();
    if metric.is_nan() {
        f64::INFINITY
    } else {
        metric
    }
}

/// Monte Carlo aggregate in the shape of the random-fault robustness tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: usize,
    pub mean_metric: f64,
    pub max_metric: f64,
    pub fail_rate: f64,
    pub outcomes: Vec<AttackOutcome>,
}

impl EvalReport {
    fn from_outcomes(outcomes: Vec<AttackOutcome>) -> Self {
        let trials = outcomes.len();
        // index order, not reduction order: byte-identical across any
        // worker count
        let mut sum = 0.0f64;
        let mut max = f64::NEG_INFINITY;
        let mut failed = 0usize;
        for o in &outcomes {
            sum += o.metric_after;
            max = max.max(o.metric_after);
            failed += o.failed as usize;
        }
        EvalReport {
            trials,
            mean_metric: sum / trials as f64,
            max_metric: max,
            fail_rate: failed as f64 / trials as f64,
            outcomes,
        }
    }

    /// Flat CSV, one row per trial. Columns are pinned:
    /// trial, seed, n_flips, metric_before, metric_after, failed.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "trial,seed,n_flips,metric_before,metric_after,failed")?;
        for (i, o) in self.outcomes.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                i,
                o.seed,
                o.flips.len(),
                o.metric_before,
                o.metric_after,
                o.failed
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Random-BER Monte Carlo: trial i flips bits of a fresh copy under seed
/// `base_seed + i` and scores it against the image's own clean reference.
/// Trials run on the rayon pool; outcomes are collected by trial index so the
/// report is identical for any worker count.
pub fn monte_carlo(
    image: &ModelImage,
    eval: &EvalSet,
    ber: f64,
    trials: usize,
    base_seed: u64,
    rule: &FailureRule,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let outcomes: Result<Vec<AttackOutcome>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let metric = |ts: &[QuantizedTensor]| proxy_metric(image, ts, eval);
            random_ber_attack(&image.tensors, ber, base_seed + i as u64, metric, rule)
        })
        .collect();
    Ok(EvalReport::from_outcomes(outcomes?))
}

/// Calibrate on the quantized baseline and protect every layer not opted
/// out. Activations come from `calib_batches` seeded batches concatenated
/// along the token axis.
pub struct ProtectOptions {
    pub calib_batches: usize,
    pub calib_tokens: usize,
    pub calib_seed: u64,
    pub layer_opt_outs: Vec<usize>,
}

impl Default for ProtectOptions {
    fn default() -> Self {
        ProtectOptions {
            calib_batches: 8,
            calib_tokens: 128,
            calib_seed: 4242,
            layer_opt_outs: Vec::new(),
        }
    }
}

/// Collect calibration activations for every layer of the image.
pub fn collect_calibration(
    image: &ModelImage,
    input_scale: &[f64],
    opts: &ProtectOptions,
) -> Result<Vec<Matrix>> {
    let d = input_scale.len();
    let total_tokens = opts.calib_batches * opts.calib_tokens;
    let mut stacked = vec![Matrix::zeros(total_tokens, 0); 0];
    let mut per_layer: Vec<Vec<f64>> = Vec::new();
    let mut dims: Vec<(usize, usize)> = Vec::new();
    for b in 0..opts.calib_batches {
        let x = sample_inputs(input_scale, opts.calib_tokens, opts.calib_seed + b as u64);
        debug_assert_eq!(x.cols(), d);
        let inputs = image.collect_layer_inputs(&x)?;
        if per_layer.is_empty() {
            per_layer = vec![Vec::new(); inputs.len()];
            dims = inputs.iter().map(|m| (0usize, m.cols())).collect();
        }
        for (l, m) in inputs.iter().enumerate() {
            per_layer[l].extend_from_slice(m.data());
            dims[l].0 += m.rows();
        }
    }
    for (l, data) in per_layer.into_iter().enumerate() {
        let (rows, cols) = dims[l];
        stacked.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(stacked)
}

/// Full protect pipeline: calibrate, rotate, fuse. Returns the protected
/// layers and the per-layer stats that produced them. Opt-out layers get an
/// empty rotation and keep their stored words bit-exactly.
pub fn protect_model(
    model: &ToyModel,
    cfg: &DefenseConfig,
    opts: &ProtectOptions,
) -> Result<(Vec<ProtectedLayer>, Vec<ChannelStats>)> {
    let activations = collect_calibration(&model.image, &model.input_scale, opts)?;
    let mut layers = Vec::with_capacity(model.image.n_layers());
    let mut all_stats = Vec::with_capacity(model.image.n_layers());
    for (l, x) in activations.iter().enumerate() {
        let mut stats = calibrate_layer(x, cfg)?;
        if opts.layer_opt_outs.contains(&l) {
            stats.outliers.clear();
        }
        let wy = build_rotation(&stats)?;
        let requant_cfg = DefenseConfig {
            requantize_fused: true,
            ..cfg.clone()
        };
        layers.push(fuse_quantized(&model.image.tensors[l], wy, &requant_cfg, l)?);
        all_stats.push(stats);
    }
    Ok((layers, all_stats))
}

/// One row of the alpha ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub reflectors: usize,
    pub post_attack_metric: f64,
}

/// For each alpha: protect the model at that sensitivity, run the greedy
/// attack at the given budget, record total reflectors and the final metric.
pub fn alpha_sweep(
    model: &ToyModel,
    alphas: &[f64],
    base_cfg: &DefenseConfig,
    opts: &ProtectOptions,
    policy: &CandidatePolicy,
    n_flips: usize,
    probe_tokens: usize,
    probe_seed: u64,
    rule: &FailureRule,
) -> Result<Vec<AlphaSweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("alphas must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = DefenseConfig {
            alpha,
            ..base_cfg.clone()
        };
        let (layers, _) = protect_model(model, &cfg, opts)?;
        let reflectors: usize = layers.iter().map(|l| l.wy.m()).sum();
        let image = ModelImage::from_layers(layers)?;
        let eval = make_eval_set(&image, &model.input_scale, probe_tokens, probe_seed)?;
        let peaks = layer_input_peaks(&image, &model.input_scale, probe_tokens, probe_seed)?;
        let metric = |ts: &[QuantizedTensor]| proxy_metric(&image, ts, &eval);
        let search = greedy_bit_search(&image.tensors, metric, n_flips, policy, Some(&peaks), rule)?;
        rows.push(AlphaSweepRow {
            alpha,
            reflectors,
            post_attack_metric: search.outcome.metric_after,
        });
    }
    Ok(rows)
}

/// Per-layer input channel peaks of an image on a probe batch, the
/// activation-weighted candidate policy's guidance.
pub fn layer_input_peaks(
    image: &ModelImage,
    input_scale: &[f64],
    tokens: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let x = sample_inputs(input_scale, tokens, seed);
    let inputs = image.collect_layer_inputs(&x)?;
    inputs.iter().map(channel_linf).collect()
}

/// Greedy search against a full image, wiring the probe metric and policy
/// guidance together.
pub fn greedy_attack_on_image(
    image: &ModelImage,
    eval: &EvalSet,
    input_scale: &[f64],
    policy: &CandidatePolicy,
    n_flips: usize,
    rule: &FailureRule,
) -> Result<GreedySearch> {
    let peaks = layer_input_peaks(image, input_scale, eval.inputs.rows(), 0xACC0)?;
    let metric = |ts: &[QuantizedTensor]| proxy_metric(image, ts, eval);
    greedy_bit_search(&image.tensors, metric, n_flips, policy, Some(&peaks), rule)
}
