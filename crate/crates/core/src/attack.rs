//! The three threat models: random bit-error-rate injection, greedy targeted
//! bit search, and the defense-aware single-point-failure column attack, plus
//! the exhaustive worst-case sweep used as the suppression oracle.
//!
//! Attacks operate on an ordered slice of stored weight tensors (the "model
//! image") and never mutate their input: every run clones the image and
//! flips bits in the private copy. The damage metric is supplied by the
//! caller, so the suite stays independent of any particular model shape.

use crate::defense::{FusedWeights, ProtectedLayer};
use crate::error::{Error, Result};
use crate::linalg::{apply_wy_right, CompactWY, Matrix};
use crate::quant::{
    bf16_encode, dequantize, hamming_distance, quantize_value, Dtype, FlipLocation,
    QuantizedTensor,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// JSON-safe (de)serialization for metrics that may be +inf.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A trial fails when `metric_after > max(absolute, relative * clean)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FailureRule {
    pub absolute: f64,
    pub relative: f64,
}

impl Default for FailureRule {
    fn default() -> Self {
        FailureRule {
            absolute: 100.0,
            relative: 20.0,
        }
    }
}

impl FailureRule {
    pub fn failed(&self, clean_metric: f64, metric_after: f64) -> bool {
        metric_after > self.absolute.max(self.relative * clean_metric)
    }
}

/// Result of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub flips: Vec<FlipLocation>,
    #[serde(with = "nullable_f64")]
    pub metric_before: f64,
    #[serde(with = "nullable_f64")]
    pub metric_after: f64,
    pub failed: bool,
    /// Distinct stored bits actually flipped.
    pub hamming_cost: u64,
    pub seed: u64,
}

/// Total stored bits across an image, the BER address space.
pub fn image_total_bits(tensors: &[QuantizedTensor]) -> u64 {
    tensors.iter().map(|t| t.total_bits()).sum()
}

fn locate_global_bit(tensors: &[QuantizedTensor], mut bit: u64) -> (usize, u64) {
    for (layer, t) in tensors.iter().enumerate() {
        let n = t.total_bits();
        if bit < n {
            return (layer, bit);
        }
        bit -= n;
    }
    unreachable!("global bit index out of range");
}

/// Apply a recorded flip set to a mutable image (replay helper).
pub fn apply_flips(tensors: &mut [QuantizedTensor], flips: &[FlipLocation]) -> Result<()> {
    for f in flips {
        if f.layer >= tensors.len() {
            return Err(Error::OutOfBounds {
                what: "layer",
                index: f.layer,
                bound: tensors.len(),
            });
        }
        tensors[f.layer].flip_bit_in_place(f)?;
    }
    Ok(())
}

/// Flip every stored bit independently with probability `ber` (seeded,
/// reproducible), then evaluate the caller's metric on the faulted image.
///
/// Sparse sampling uses geometric gap skipping, so the cost is proportional
/// to the number of flips rather than the number of bits.
pub fn random_ber_attack<F>(
    tensors: &[QuantizedTensor],
    ber: f64,
    seed: u64,
    metric: F,
    rule: &FailureRule,
) -> Result<AttackOutcome>
where
    F: Fn(&[QuantizedTensor]) -> f64,
{
    if !(0.0..=1.0).contains(&ber) {
        return Err(Error::InvalidArgument(format!("ber {ber} outside [0, 1]")));
    }
    let metric_before = metric(tensors);
    let mut working = tensors.to_vec();
    let total = image_total_bits(&working);
    let mut flips = Vec::new();
    if ber >= 1.0 {
        for pos in 0..total {
            let (layer, local) = locate_global_bit(&working, pos);
            let mut loc = working[layer].flip_linear_bit(local);
            loc.layer = layer;
            flips.push(loc);
        }
    } else if ber > 0.0 && total > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_keep = (1.0 - ber).ln();
        let mut pos: u64 = 0;
        loop {
            // geometric gap: floor(ln(U)/ln(1-p)), U in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            let gap = (u.ln() / log_keep).floor();
            if !gap.is_finite() || gap >= (total - pos) as f64 {
                break;
            }
            pos += gap as u64;
            let (layer, local) = locate_global_bit(&working, pos);
            let mut loc = working[layer].flip_linear_bit(local);
            loc.layer = layer;
            flips.push(loc);
            pos += 1;
            if pos >= total {
                break;
            }
        }
    }
    let metric_after = metric(&working);
    let hamming_cost = flips.len() as u64;
    Ok(AttackOutcome {
        flips,
        metric_before,
        metric_after,
        failed: rule.failed(metric_before, metric_after),
        hamming_cost,
        seed,
    })
}

/// Candidate ranking for the greedy search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Highest-magnitude weights per layer.
    TopMagnitude,
    /// Weights ranked by |MSB flip delta| x input-channel peak, the
    /// amplification-aware stand-in for gradient guidance; needs the
    /// attacked image's own calibrated peaks.
    ActivationWeighted,
}

#[derive(Debug, Clone)]
pub struct CandidatePolicy {
    pub kind: PolicyKind,
    /// Candidates per layer.
    pub top_k: usize,
    /// Bits to try on each candidate element; empty means MSB only.
    pub bits: Vec<u8>,
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        CandidatePolicy {
            kind: PolicyKind::TopMagnitude,
            top_k: 32,
            bits: Vec::new(),
        }
    }
}

impl CandidatePolicy {
    fn bits_for(&self, dtype: Dtype) -> Vec<u8> {
        if self.bits.is_empty() {
            vec![dtype.bit_width() - 1]
        } else {
            self.bits.clone()
        }
    }
}

/// Enumerate the policy's current candidate flips, deterministically ordered
/// by descending score then position. `layer_peaks` holds per-layer input
/// channel peaks and is required by the activation-weighted policy.
pub fn candidate_set(
    tensors: &[QuantizedTensor],
    policy: &CandidatePolicy,
    layer_peaks: Option<&[Vec<f64>]>,
) -> Result<Vec<FlipLocation>> {
    let mut all = Vec::new();
    for (layer, t) in tensors.iter().enumerate() {
        let bits = policy.bits_for(t.dtype());
        let msb = t.dtype().bit_width() - 1;
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(t.rows() * t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let score = match policy.kind {
                    PolicyKind::TopMagnitude => t.dequant_at(r, c).abs(),
                    PolicyKind::ActivationWeighted => {
                        let peaks = layer_peaks.ok_or_else(|| {
                            Error::InvalidArgument(
                                "activation-weighted policy needs layer peaks".into(),
                            )
                        })?;
                        if layer >= peaks.len() || r >= peaks[layer].len() {
                            return Err(Error::InvalidArgument(format!(
                                "layer peaks missing for layer {layer} row {r}"
                            )));
                        }
                        // |delta| of the MSB flip at this element
                        let mut scratch = t.clone();
                        let loc = FlipLocation { layer, row: r, col: c, bit: msb };
                        let delta = scratch.flip_bit_in_place(&loc)?;
                        delta.abs() * peaks[layer][r]
                    }
                };
                scored.push((score, r, c));
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        for &(_, r, c) in scored.iter().take(policy.top_k) {
            for &bit in &bits {
                if bit < t.dtype().bit_width() {
                    all.push(FlipLocation { layer, row: r, col: c, bit });
                }
            }
        }
    }
    Ok(all)
}

/// Greedy search result: final outcome plus the metric after every applied
/// flip (the attack trace).
#[derive(Debug, Clone, Serialize)]
pub struct GreedySearch {
    pub outcome: AttackOutcome,
    pub trace: Vec<f64>,
}

/// Progressive greedy bit search: each step evaluates the policy's candidate
/// flips on the current image and permanently applies the one maximizing the
/// metric. Stops early when no candidate avoids decreasing it, so the trace
/// is non-decreasing by construction.
pub fn greedy_bit_search<F>(
    tensors: &[QuantizedTensor],
    metric: F,
    n_flips: usize,
    policy: &CandidatePolicy,
    layer_peaks: Option<&[Vec<f64>]>,
    rule: &FailureRule,
) -> Result<GreedySearch>
where
    F: Fn(&[QuantizedTensor]) -> f64,
{
    let mut working = tensors.to_vec();
    let metric_before = metric(&working);
    let mut current = metric_before;
    let mut flips: Vec<FlipLocation> = Vec::new();
    let mut trace = Vec::with_capacity(n_flips);
    let mut applied = std::collections::BTreeSet::new();

    for _ in 0..n_flips {
        let candidates = candidate_set(&working, policy, layer_peaks)?;
        let mut best: Option<(f64, FlipLocation)> = None;
        for cand in candidates {
            let key = (cand.layer, cand.row, cand.col, cand.bit);
            if applied.contains(&key) {
                continue;
            }
            working[cand.layer].flip_bit_in_place(&cand)?;
            let m = metric(&working);
            working[cand.layer].flip_bit_in_place(&cand)?; // revert
            let better = match &best {
                None => true,
                Some((bm, _)) => m > *bm,
            };
            if better {
                best = Some((m, cand));
            }
        }
        match best {
            Some((m, cand)) if m >= current => {
                working[cand.layer].flip_bit_in_place(&cand)?;
                applied.insert((cand.layer, cand.row, cand.col, cand.bit));
                flips.push(cand);
                current = m;
                trace.push(m);
            }
            _ => break,
        }
    }

    let hamming_cost = flips.len() as u64;
    Ok(GreedySearch {
        outcome: AttackOutcome {
            flips,
            metric_before,
            metric_after: current,
            failed: rule.failed(metric_before, current),
            hamming_cost,
            seed: 0,
        },
        trace,
    })
}

/// Result of bisecting a failing flip set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LocateOutcome {
    /// One flip alone triggers the failure rule.
    Isolated {
        flip: FlipLocation,
        evaluations: usize,
    },
    /// Neither half of some subset fails on its own: the failure needs an
    /// interaction between flips.
    NonIsolable { evaluations: usize },
}

/// Bisect a failing flip set down to a single fatal flip, replaying each half
/// against a fresh copy. Uses at most `2 * ceil(log2 N) + 2` metric
/// evaluations. The input set is assumed to trigger the rule (it came from a
/// failing trial); a singleton input is verified directly.
pub fn spfa_locate<F>(
    tensors: &[QuantizedTensor],
    failing: &[FlipLocation],
    metric: F,
    rule: &FailureRule,
    clean_metric: f64,
) -> Result<LocateOutcome>
where
    F: Fn(&[QuantizedTensor]) -> f64,
{
    if failing.is_empty() {
        return Err(Error::InvalidArgument("empty flip set".into()));
    }
    let mut evaluations = 0usize;
    let mut fails = |set: &[FlipLocation]| -> Result<bool> {
        let mut copy = tensors.to_vec();
        apply_flips(&mut copy, set)?;
        evaluations += 1;
        Ok(rule.failed(clean_metric, metric(&copy)))
    };

    let mut set = failing.to_vec();
    if set.len() == 1 {
        return if fails(&set)? {
            Ok(LocateOutcome::Isolated {
                flip: set[0],
                evaluations,
            })
        } else {
            Err(Error::InvalidArgument(
                "flip set does not trigger the failure rule".into(),
            ))
        };
    }
    while set.len() > 1 {
        let mid = set.len() / 2;
        let (a, b) = set.split_at(mid);
        if fails(a)? {
            set = a.to_vec();
        } else if fails(b)? {
            set = b.to_vec();
        } else {
            return Ok(LocateOutcome::NonIsolable { evaluations });
        }
    }
    // the last bisection step verified this singleton by replay
    Ok(LocateOutcome::Isolated {
        flip: set[0],
        evaluations,
    })
}

/// Full-precision column perturbation `delta * (Q^T)_{:,r}` with
/// `Q^T = I - V T^T V^T`. This is what a defense-aware adversary must add to
/// column c of the fused weights to replicate a single-element fault.
pub fn column_perturbation(wy: &CompactWY, r: usize, delta: f64) -> Result<Vec<f64>> {
    let d = wy.dim();
    if r >= d {
        return Err(Error::OutOfBounds {
            what: "row",
            index: r,
            bound: d,
        });
    }
    let m = wy.m();
    let mut col = vec![0.0; d];
    col[r] = 1.0;
    if m > 0 {
        let v = wy.v_factor();
        let t = wy.t_factor();
        // V^T e_r = row r of V
        let vt_er: Vec<f64> = (0..m).map(|j| v.get(r, j)).collect();
        // T^T (V^T e_r)
        let mut w = vec![0.0; m];
        for (i, slot) in w.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &x) in vt_er.iter().enumerate() {
                acc += t.get(j, i) * x;
            }
            *slot = acc;
        }
        for (i, slot) in col.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &x) in w.iter().enumerate() {
                acc += v.get(i, j) * x;
            }
            *slot -= acc;
        }
    }
    for slot in &mut col {
        *slot *= delta;
    }
    Ok(col)
}

/// Realized white-box column attack.
#[derive(Debug, Clone)]
pub struct ColumnAttack {
    /// The exact full-precision perturbation added to column c.
    pub perturbation: Vec<f64>,
    /// Fused tensor with the perturbed column re-quantized under frozen
    /// scales.
    pub perturbed: QuantizedTensor,
    /// Stored words that changed (raw element count).
    pub changed_elements: usize,
    /// Bit-level accounting; metrics are not populated at layer scope.
    pub outcome: AttackOutcome,
}

/// Replicate a baseline single-element fault of magnitude `delta` at weight
/// position (r, c) through the rotation: corrupts the entire c-th column of
/// the stored fused tensor. The victim column is re-quantized with the fused
/// tensor's frozen scales (the attacker flips bits, not scales).
pub fn spfa_column_attack(
    layer: &ProtectedLayer,
    r: usize,
    c: usize,
    delta: f64,
) -> Result<ColumnAttack> {
    let fused = match &layer.fused {
        FusedWeights::Quantized(q) => q,
        FusedWeights::Full(_) => {
            return Err(Error::InvalidArgument(
                "column attack needs stored (quantized) fused weights; \
                 use column_perturbation for full-precision analysis"
                    .into(),
            ))
        }
    };
    if c >= fused.cols() {
        return Err(Error::OutOfBounds {
            what: "col",
            index: c,
            bound: fused.cols(),
        });
    }
    let perturbation = column_perturbation(&layer.wy, r, delta)?;
    let mut perturbed = fused.clone();
    for (j, &dp) in perturbation.iter().enumerate() {
        let new_val = fused.dequant_at(j, c) + dp;
        let word = match fused.dtype() {
            Dtype::Int8 => {
                let q = quantize_value(new_val, fused.scale_for_row(j), fused.zero_point());
                q as u8 as u16
            }
            Dtype::Bf16 => bf16_encode(new_val),
        };
        perturbed.set_word(j, c, word);
    }
    let mut flips = Vec::new();
    let mut changed_elements = 0usize;
    for j in 0..fused.rows() {
        let diff = fused.word_at(j, c) ^ perturbed.word_at(j, c);
        if diff != 0 {
            changed_elements += 1;
            for bit in 0..fused.bit_width() {
                if diff & (1 << bit) != 0 {
                    flips.push(FlipLocation {
                        layer: layer.layer_id,
                        row: j,
                        col: c,
                        bit,
                    });
                }
            }
        }
    }
    let hamming_cost = hamming_distance(fused, &perturbed)?;
    debug_assert_eq!(hamming_cost, flips.len() as u64);
    Ok(ColumnAttack {
        perturbation,
        perturbed,
        changed_elements,
        outcome: AttackOutcome {
            flips,
            metric_before: 0.0,
            metric_after: 0.0,
            failed: false,
            hamming_cost,
            seed: 0,
        },
    })
}

/// Exhaustively flip every (row, col, bit) of the stored fused tensor one at
/// a time and measure the output perturbation `||Y' - Y||_inf` on the probe,
/// recomputing the affected output column each time. Returns the maximum and
/// where it happened. This is the measurement oracle for the suppression
/// claims; beyond d ~ 512 it gets slow.
pub fn worst_case_perturbation(
    layer: &ProtectedLayer,
    x: &Matrix,
    bits: &[u8],
) -> Result<(f64, FlipLocation)> {
    let fused = match &layer.fused {
        FusedWeights::Quantized(q) => q,
        FusedWeights::Full(_) => {
            return Err(Error::InvalidArgument(
                "worst-case sweep needs stored (quantized) fused weights".into(),
            ))
        }
    };
    let x_eff = apply_wy_right(x, &layer.wy)?;
    let w = dequantize(fused);
    let n = x_eff.rows();
    // baseline output columns
    let y_base = x_eff.matmul(&w)?;

    let mut scratch = fused.clone();
    let mut best = 0.0f64;
    let mut best_loc = FlipLocation {
        layer: layer.layer_id,
        row: 0,
        col: 0,
        bit: bits.first().copied().unwrap_or(0),
    };
    let mut col_buf = vec![0.0f64; fused.rows()];
    for r in 0..fused.rows() {
        for c in 0..fused.cols() {
            for &bit in bits {
                let loc = FlipLocation { layer: layer.layer_id, row: r, col: c, bit };
                let delta = scratch.flip_bit_in_place(&loc)?;
                scratch.flip_bit_in_place(&loc)?; // restore stored words
                // recompute output column c with the faulted element
                for (j, slot) in col_buf.iter_mut().enumerate() {
                    *slot = w.get(j, c);
                }
                col_buf[r] += delta;
                let mut max_dev = 0.0f64;
                for i in 0..n {
                    let row = x_eff.row(i);
                    let mut acc = 0.0;
                    for (j, &wc) in col_buf.iter().enumerate() {
                        acc += row[j] * wc;
                    }
                    max_dev = max_dev.max((acc - y_base.get(i, c)).abs());
                }
                if max_dev > best {
                    best = max_dev;
                    best_loc = loc;
                }
            }
        }
    }
    Ok((best, best_loc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::{fuse_quantized, DefenseConfig, ProtectedLayer};
    use crate::linalg::{apply_wy_transpose_left, householder_from_outlier, wy_append};
    use crate::quant::{quantize, ScaleMode};
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn image(seed: u64) -> Vec<QuantizedTensor> {
        vec![
            quantize(&random_matrix(8, 8, seed), ScaleMode::PerRow, Dtype::Int8),
            quantize(&random_matrix(8, 4, seed + 1), ScaleMode::PerRow, Dtype::Int8),
        ]
    }

    fn wy_on(d: usize, channels: &[usize]) -> CompactWY {
        let mut wy = CompactWY::empty(d);
        for &k in channels {
            wy = wy_append(&wy, &householder_from_outlier(d, k).unwrap()).unwrap();
        }
        wy
    }

    /// Metric that counts flipped-away mass vs a reference image.
    fn diff_metric(reference: Vec<QuantizedTensor>) -> impl Fn(&[QuantizedTensor]) -> f64 {
        move |ts: &[QuantizedTensor]| {
            let mut acc = 0.0;
            for (a, b) in ts.iter().zip(&reference) {
                for r in 0..a.rows() {
                    for c in 0..a.cols() {
                        let d = a.dequant_at(r, c) - b.dequant_at(r, c);
                        acc += d * d;
                    }
                }
            }
            1.0 + acc
        }
    }

    #[test]
    fn ber_zero_flips_nothing() {
        let img = image(1);
        let metric = diff_metric(img.clone());
        let out = random_ber_attack(&img, 0.0, 7, &metric, &FailureRule::default()).unwrap();
        assert!(out.flips.is_empty());
        assert_eq!(out.metric_before, out.metric_after);
        assert!(!out.failed);
    }

    #[test]
    fn ber_one_flips_every_bit() {
        let img = image(2);
        let total = image_total_bits(&img);
        let metric = diff_metric(img.clone());
        let out = random_ber_attack(&img, 1.0, 7, &metric, &FailureRule::default()).unwrap();
        assert_eq!(out.hamming_cost, total);
    }

    #[test]
    fn ber_mean_flip_count_within_binomial_interval() {
        let img = image(3);
        let total = image_total_bits(&img) as f64;
        let ber = 3e-4;
        let metric = |_: &[QuantizedTensor]| 1.0;
        let n_seeds = 200;
        let mut sum = 0.0;
        for seed in 0..n_seeds {
            let out = random_ber_attack(&img, ber, seed, &metric, &FailureRule::default()).unwrap();
            sum += out.hamming_cost as f64;
        }
        let mean = sum / n_seeds as f64;
        let expect = total * ber;
        // 99.9% interval for the mean of n_seeds binomial draws
        let half_width = 3.29 * (total * ber * (1.0 - ber) / n_seeds as f64).sqrt();
        assert!(
            (mean - expect).abs() <= half_width,
            "mean {mean} vs {expect} +- {half_width}"
        );
    }

    #[test]
    fn ber_outcome_is_reproducible() {
        let img = image(4);
        let metric = diff_metric(img.clone());
        let a = random_ber_attack(&img, 1e-2, 99, &metric, &FailureRule::default()).unwrap();
        let b = random_ber_attack(&img, 1e-2, 99, &metric, &FailureRule::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn greedy_zero_budget() {
        let img = image(5);
        let metric = diff_metric(img.clone());
        let g = greedy_bit_search(
            &img,
            &metric,
            0,
            &CandidatePolicy::default(),
            None,
            &FailureRule::default(),
        )
        .unwrap();
        assert!(g.outcome.flips.is_empty());
        assert_eq!(g.outcome.metric_before, g.outcome.metric_after);
    }

    #[test]
    fn greedy_trace_is_non_decreasing() {
        let img = image(6);
        let metric = diff_metric(img.clone());
        let g = greedy_bit_search(
            &img,
            &metric,
            8,
            &CandidatePolicy { top_k: 4, ..CandidatePolicy::default() },
            None,
            &FailureRule::default(),
        )
        .unwrap();
        for w in g.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(g.trace.last().copied().unwrap(), g.outcome.metric_after);
    }

    #[test]
    fn greedy_first_flip_matches_exhaustive_oracle() {
        let img = image(7);
        let metric = diff_metric(img.clone());
        let policy = CandidatePolicy { top_k: 6, ..CandidatePolicy::default() };
        let g = greedy_bit_search(&img, &metric, 1, &policy, None, &FailureRule::default()).unwrap();
        // oracle: evaluate every candidate on a fresh copy, take the argmax
        let candidates = candidate_set(&img, &policy, None).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_loc = None;
        for cand in candidates {
            let mut fresh = img.clone();
            fresh[cand.layer].flip_bit_in_place(&cand).unwrap();
            let m = metric(&fresh);
            if m > best {
                best = m;
                best_loc = Some(cand);
            }
        }
        assert_eq!(g.outcome.flips[0], best_loc.unwrap());
        assert_eq!(g.outcome.metric_after, best);
    }

    #[test]
    fn locate_single_fatal_flip() {
        let img = image(8);
        let metric = diff_metric(img.clone());
        // find a genuinely fatal single flip under a tight rule
        let rule = FailureRule { absolute: 1.01, relative: 1.0 };
        let fatal = FlipLocation { layer: 0, row: 2, col: 2, bit: 7 };
        let out = spfa_locate(&img, &[fatal], &metric, &rule, 1.0).unwrap();
        match out {
            LocateOutcome::Isolated { flip, evaluations } => {
                assert_eq!(flip, fatal);
                assert!(evaluations <= 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn locate_fatal_among_benign_crowd() {
        // big image so 1023 distinct benign bits exist
        let w = random_matrix(32, 32, 9);
        let img = vec![quantize(&w, ScaleMode::PerRow, Dtype::Int8)];
        let fatal = FlipLocation { layer: 0, row: 5, col: 5, bit: 7 };
        // metric keyed to that one element: fails only when (5,5) changed a lot
        let reference = img[0].dequant_at(5, 5);
        let metric = move |ts: &[QuantizedTensor]| {
            1.0 + (ts[0].dequant_at(5, 5) - reference).abs() * 1e4
        };
        let rule = FailureRule { absolute: 50.0, relative: 20.0 };
        let mut set = Vec::new();
        // 1023 benign LSB flips on other elements
        'outer: for r in 0..32 {
            for c in 0..32 {
                if (r, c) != (5, 5) {
                    set.push(FlipLocation { layer: 0, row: r, col: c, bit: 0 });
                    if set.len() == 1023 {
                        break 'outer;
                    }
                }
            }
        }
        set.insert(400, fatal);
        assert_eq!(set.len(), 1024);
        let out = spfa_locate(&img, &set, &metric, &rule, 1.0).unwrap();
        match out {
            LocateOutcome::Isolated { flip, evaluations } => {
                assert_eq!(flip, fatal);
                assert!(evaluations <= 22, "{evaluations}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn locate_reports_interaction_as_non_isolable() {
        let img = image(10);
        // two flips that only jointly cross the rule
        let f1 = FlipLocation { layer: 0, row: 0, col: 0, bit: 6 };
        let f2 = FlipLocation { layer: 0, row: 1, col: 1, bit: 6 };
        let r0 = img[0].dequant_at(0, 0);
        let r1 = img[0].dequant_at(1, 1);
        let metric = move |ts: &[QuantizedTensor]| {
            let a = (ts[0].dequant_at(0, 0) - r0).abs() > 1e-12;
            let b = (ts[0].dequant_at(1, 1) - r1).abs() > 1e-12;
            match (a, b) {
                (true, true) => 1000.0,
                _ => 1.0,
            }
        };
        let rule = FailureRule::default();
        let out = spfa_locate(&img, &[f1, f2], &metric, &rule, 1.0).unwrap();
        assert!(matches!(out, LocateOutcome::NonIsolable { .. }));
    }

    #[test]
    fn column_attack_identity_rotation_touches_one_element() {
        let w = random_matrix(12, 6, 11);
        let q = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
        let layer = ProtectedLayer::unprotected(3, &q);
        // MSB-style delta on a positive element
        let (r, c) = (4, 2);
        let delta = -128.0 * q.scale_for_row(r) as f64;
        let atk = spfa_column_attack(&layer, r, c, delta).unwrap();
        assert_eq!(atk.changed_elements, 1);
        assert!(atk.outcome.hamming_cost >= 1);
        // the only perturbed element is (r, c)
        for (j, &p) in atk.perturbation.iter().enumerate() {
            if j == r {
                assert!((p - delta).abs() < 1e-12);
            } else {
                assert_eq!(p, 0.0);
            }
        }
        // and the realized word diff equals that element's bit diff
        let diff = atk.perturbed.word_at(r, c) ^ q.word_at(r, c);
        assert_eq!(atk.outcome.hamming_cost, diff.count_ones() as u64);
    }

    #[test]
    fn column_attack_algebra_matches_rank_one_update() {
        // X~ (W~ + dW~) == X W + delta * X_{:,r} e_c^T in full precision
        let d = 32;
        let w = random_matrix(d, 10, 12);
        let x = random_matrix(6, d, 13);
        let wy = wy_on(d, &[2, 11, 19]);
        let w_rot = apply_wy_transpose_left(&w, &wy).unwrap();
        for (r, c, delta) in [(2usize, 3usize, 0.75), (17, 0, -2.5), (31, 9, 10.0)] {
            let pert = column_perturbation(&wy, r, delta).unwrap();
            let mut w_attacked = w_rot.clone();
            for j in 0..d {
                w_attacked.set(j, c, w_attacked.get(j, c) + pert[j]);
            }
            let x_rot = apply_wy_right(&x, &wy).unwrap();
            let got = x_rot.matmul(&w_attacked).unwrap();
            let mut want = x.matmul(&w).unwrap();
            for i in 0..x.rows() {
                want.set(i, c, want.get(i, c) + delta * x.get(i, r));
            }
            let scale = 1.0 + want.max_abs() + delta.abs() * x.max_abs();
            assert!(got.sub(&want).unwrap().max_abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn column_attack_densifies_on_bf16() {
        // d=256, m=8: the stored-bit cost explodes to thousands of bits
        let d = 256;
        let w = random_matrix(d, d, 14);
        let scale = 1.0 / (d as f64).sqrt();
        let w = Matrix::from_vec(d, d, w.data().iter().map(|x| x * scale).collect()).unwrap();
        let q = quantize(&w, ScaleMode::PerTensor, Dtype::Bf16);
        let channels: Vec<usize> = (0..8).map(|i| i * d / 8 + 3).collect();
        let wy = wy_on(d, &channels);
        let cfg = DefenseConfig { requantize_fused: true, ..DefenseConfig::default() };
        let layer = fuse_quantized(&q, wy, &cfg, 0).unwrap();
        let fused = match &layer.fused {
            FusedWeights::Quantized(t) => t.clone(),
            _ => unreachable!(),
        };
        let r = channels[0];
        // victim: largest positive element of row r, exponent-MSB flip
        let mut c = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..d {
            let v = fused.dequant_at(r, j);
            if v > best {
                best = v;
                c = j;
            }
        }
        let word = fused.word_at(r, c);
        let delta = crate::quant::bf16_decode(word ^ (1 << 14)) - crate::quant::bf16_decode(word);
        let atk = spfa_column_attack(&layer, r, c, delta).unwrap();
        assert!(
            atk.outcome.hamming_cost >= (d as u64) * 8 / 2,
            "hamming {} below 0.5*d*b",
            atk.outcome.hamming_cost
        );
        assert!(atk.outcome.hamming_cost > 1);
    }

    #[test]
    fn worst_case_zero_activations() {
        let w = random_matrix(8, 8, 15);
        let q = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
        let layer = ProtectedLayer::unprotected(0, &q);
        let x = Matrix::zeros(4, 8);
        let (max_dev, _) = worst_case_perturbation(&layer, &x, &[7]).unwrap();
        assert_eq!(max_dev, 0.0);
    }

    #[test]
    fn worst_case_argmax_aligns_with_spike_and_defense_suppresses() {
        let d = 32;
        let spike = 9usize;
        let w = random_matrix(d, d, 16);
        let scale = 1.0 / (d as f64).sqrt();
        let w = Matrix::from_vec(d, d, w.data().iter().map(|x| x * scale).collect()).unwrap();
        let mut x = random_matrix(12, d, 17);
        for i in 0..12 {
            x.set(i, spike, x.get(i, spike) * 32.0);
        }
        let q = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
        let baseline = ProtectedLayer::unprotected(0, &q);
        let bits: Vec<u8> = (0..8).collect();
        let (base_max, base_loc) = worst_case_perturbation(&baseline, &x, &bits).unwrap();
        assert_eq!(base_loc.row, spike);

        let cfg = DefenseConfig { requantize_fused: true, ..DefenseConfig::default() };
        let protected = fuse_quantized(&q, wy_on(d, &[spike]), &cfg, 0).unwrap();
        let (prot_max, _) = worst_case_perturbation(&protected, &x, &bits).unwrap();
        assert!(prot_max < base_max, "{prot_max} !< {base_max}");
    }
}
