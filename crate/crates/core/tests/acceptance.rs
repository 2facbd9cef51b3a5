//! Acceptance suite: one test per release gate, each printing a PASS line
//! with the measured numbers (visible with `--nocapture`).
//!
//! Run with `cargo test -p ror-core --test acceptance -- --nocapture`.

use ror_core::attack::{
    column_perturbation, spfa_column_attack, spfa_locate, worst_case_perturbation,
    CandidatePolicy, FailureRule, LocateOutcome, PolicyKind,
};
use ror_core::container::{from_bytes, to_bytes, RortContainer, TensorPayload};
use ror_core::defense::{
    flop_overhead, fuse_quantized, fuse_weights, verify_lossless, DefenseConfig, FusedWeights,
    ProtectedLayer,
};
use ror_core::harness::{
    alpha_sweep, build_toy_model, greedy_attack_on_image, make_eval_set, monte_carlo,
    protect_model, proxy_metric, ModelImage, OutlierSpec, ProtectOptions, ToyModel,
};
use ror_core::linalg::{
    apply_householder, apply_wy_right, householder_from_outlier, wy_append, wy_to_dense,
    CompactWY, Matrix,
};
use ror_core::quant::{
    bf16_decode, flip_bit, hamming_distance, quantize, Dtype, FlipLocation, ScaleMode,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn scaled_random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    let m = random_matrix(rows, cols, seed);
    Matrix::from_vec(rows, cols, m.data().iter().map(|x| x * scale).collect()).unwrap()
}

fn wy_on_channels(d: usize, channels: &[usize]) -> CompactWY {
    let mut wy = CompactWY::empty(d);
    for &k in channels {
        wy = wy_append(&wy, &householder_from_outlier(d, k).unwrap()).unwrap();
    }
    wy
}

fn spread_channels(d: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| (i * d / m + 3) % d).collect()
}

/// The planted-outlier Monte Carlo model shared by several gates.
fn spof_model() -> ToyModel {
    build_toy_model(
        &[320, 256, 128],
        42,
        &[OutlierSpec { layer: 0, channel: 7, magnitude: 32.0 }],
        Dtype::Int8,
        ScaleMode::PerRow,
    )
    .unwrap()
}

#[test]
fn lossless_protection_over_random_layer_grid() {
    let t0 = Instant::now();
    let dims = [64usize, 256, 1024];
    let ms = [0usize, 1, 8, 32];
    let cfg = DefenseConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    'outer: for round in 0.. {
        for &d in &dims {
            for &m in &ms {
                if cases == 100 {
                    break 'outer;
                }
                let seed = (round * 100 + cases) as u64;
                let w = random_matrix(d, d / 2, seed);
                let x = random_matrix(8, d, seed + 10_000);
                let wy = wy_on_channels(d, &spread_channels(d, m));
                let layer = fuse_weights(&w, wy, &cfg, 0).unwrap();
                let report = verify_lossless(&w, &layer, &x, 1e-9).unwrap();
                assert!(
                    report.pass,
                    "d={d} m={m} deviation {} > 1e-9",
                    report.max_rel_dev
                );
                worst = worst.max(report.max_rel_dev);
                cases += 1;
            }
        }
    }
    println!(
        "PASS losslessness: {cases} full-precision layers, worst relative deviation {:.3e} (tol 1e-9) in {:.1?}",
        worst,
        t0.elapsed()
    );
}

#[test]
fn wy_orthogonality_and_sequential_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // mostly small dims plus forced big cases up to the spec scale
    let mut cases: Vec<(usize, usize)> = vec![(1024, 64), (1024, 1), (768, 48), (512, 64)];
    while cases.len() < 50 {
        let d = 8usize << (rng.random::<u32>() % 6); // 8..256
        let m = 1 + (rng.random::<u32>() as usize % (d / 4).clamp(1, 64));
        cases.push((d, m));
    }
    let mut worst_orth = 0.0f64;
    let mut worst_seq = 0.0f64;
    for (i, &(d, m)) in cases.iter().enumerate() {
        let channels: Vec<usize> = {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < m {
                set.insert(rng.random::<u32>() as usize % d);
            }
            set.into_iter().collect()
        };
        let wy = wy_on_channels(d, &channels);
        let q = wy_to_dense(&wy);
        let orth = q
            .transpose()
            .matmul(&q)
            .unwrap()
            .sub(&Matrix::identity(d))
            .unwrap()
            .frobenius_norm();
        assert!(orth <= 1e-10, "case {i} (d={d} m={m}): orth {orth}");
        worst_orth = worst_orth.max(orth);

        let mut prod = Matrix::identity(d);
        for &k in wy.protected_channels() {
            prod = apply_householder(&prod, &householder_from_outlier(d, k).unwrap()).unwrap();
        }
        let seq = q.sub(&prod).unwrap().frobenius_norm();
        assert!(seq <= 1e-10, "case {i} (d={d} m={m}): seq {seq}");
        worst_seq = worst_seq.max(seq);
    }
    println!(
        "PASS wy-orthogonality: 50 cases up to d=1024 m=64, worst ||Q^T Q - I||_F {:.3e}, worst ||Q - prod H_i||_F {:.3e} (tol 1e-10) in {:.1?}",
        worst_orth,
        worst_seq,
        t0.elapsed()
    );
}

#[test]
fn spike_smoothing_and_worst_case_suppression() {
    let t0 = Instant::now();
    // exact relocation: column k of X Q equals X u
    let d = 128;
    let k = 9usize;
    let x0 = random_matrix(24, d, 31);
    let wy1 = wy_on_channels(d, &[k]);
    let rotated = apply_wy_right(&x0, &wy1).unwrap();
    let u = (d as f64).sqrt().recip();
    let mut worst_reloc = 0.0f64;
    for i in 0..x0.rows() {
        let xu: f64 = x0.row(i).iter().map(|a| a * u).sum();
        worst_reloc = worst_reloc.max((rotated.get(i, k) - xu).abs());
    }
    assert!(worst_reloc <= 1e-12, "relocation error {worst_reloc}");

    // exhaustive single-flip sweep on a planted x32 spike, d = 128
    let w = scaled_random_matrix(d, d, 32, 1.0 / (d as f64).sqrt());
    let mut x = random_matrix(48, d, 33);
    for i in 0..x.rows() {
        x.set(i, k, x.get(i, k) * 32.0);
    }
    let q = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
    let baseline = ProtectedLayer::unprotected(0, &q);
    let bits: Vec<u8> = (0..8).collect();
    let (base_max, base_loc) = worst_case_perturbation(&baseline, &x, &bits).unwrap();
    assert_eq!(base_loc.row, k, "baseline argmax should align with the spike");

    let cfg = DefenseConfig {
        requantize_fused: true,
        ..DefenseConfig::default()
    };
    let protected = fuse_quantized(&q, wy_on_channels(d, &[k]), &cfg, 0).unwrap();
    let (prot_max, _) = worst_case_perturbation(&protected, &x, &bits).unwrap();
    assert!(
        prot_max <= base_max / 5.0,
        "suppression {prot_max} not <= {}/5",
        base_max
    );
    println!(
        "PASS spike-smoothing: relocation error {:.3e} (tol 1e-12); exhaustive worst case {:.3} -> {:.3} (ratio {:.1}x, need >= 5x) in {:.1?}",
        worst_reloc,
        base_max,
        prot_max,
        base_max / prot_max,
        t0.elapsed()
    );
}

#[test]
fn spof_reproduction_and_elimination() {
    let t0 = Instant::now();
    let model = spof_model();
    let cfg = DefenseConfig::default();
    let opts = ProtectOptions::default();
    let (layers, stats) = protect_model(&model, &cfg, &opts).unwrap();
    assert!(
        stats[0].outliers.contains(&7),
        "alpha=6 must flag the planted channel: {:?}",
        stats[0].outliers
    );
    let protected = ModelImage::from_layers(layers).unwrap();

    let rule = FailureRule::default();
    let trials = 500usize;
    let base_seed = 10_000u64;
    let base_eval = make_eval_set(&model.image, &model.input_scale, 64, 777).unwrap();
    let prot_eval = make_eval_set(&protected, &model.input_scale, 64, 777).unwrap();
    let base_report =
        monte_carlo(&model.image, &base_eval, 3e-4, trials, base_seed, &rule).unwrap();
    let prot_report =
        monte_carlo(&protected, &prot_eval, 3e-4, trials, base_seed, &rule).unwrap();
    assert!(
        base_report.fail_rate > 0.0,
        "baseline never failed across {trials} seeds"
    );
    assert_eq!(
        prot_report.fail_rate, 0.0,
        "protected failed: max {}",
        prot_report.max_metric
    );

    // bisect the first failing baseline seed down to one fatal flip
    let failing = base_report
        .outcomes
        .iter()
        .find(|o| o.failed)
        .expect("some failing trial");
    let n = failing.flips.len();
    let budget = 2 * (n as f64).log2().ceil() as usize + 2;
    let metric = |ts: &[ror_core::quant::QuantizedTensor]| proxy_metric(&model.image, ts, &base_eval);
    let located = spfa_locate(
        &model.image.tensors,
        &failing.flips,
        metric,
        &rule,
        failing.metric_before,
    )
    .unwrap();
    let LocateOutcome::Isolated { flip, evaluations } = located else {
        panic!("failing seed not isolable");
    };
    assert!(
        evaluations <= budget,
        "{evaluations} evaluations > budget {budget} for |set| = {n}"
    );
    // replay: the isolated flip alone crosses the rule
    let mut copy = model.image.tensors.clone();
    ror_core::attack::apply_flips(&mut copy, &[flip]).unwrap();
    assert!(rule.failed(failing.metric_before, metric(&copy)));

    println!(
        "PASS spof: baseline fail rate {:.3} vs protected 0.000 over {trials} paired seeds; fatal flip (layer {}, row {}, bit {}) isolated in {evaluations}/{budget} evaluations in {:.1?}",
        base_report.fail_rate,
        flip.layer,
        flip.row,
        flip.bit,
        t0.elapsed()
    );
}

#[test]
fn greedy_attack_resistance() {
    let t0 = Instant::now();
    let model = spof_model();
    let cfg = DefenseConfig::default();
    let opts = ProtectOptions::default();
    let (layers, _) = protect_model(&model, &cfg, &opts).unwrap();
    let protected = ModelImage::from_layers(layers).unwrap();

    let rule = FailureRule::default();
    let policy = CandidatePolicy {
        kind: PolicyKind::ActivationWeighted,
        top_k: 16,
        bits: Vec::new(),
    };
    let n_steps = 50;
    let base_eval = make_eval_set(&model.image, &model.input_scale, 64, 777).unwrap();
    let prot_eval = make_eval_set(&protected, &model.input_scale, 64, 777).unwrap();
    let base = greedy_attack_on_image(
        &model.image,
        &base_eval,
        &model.input_scale,
        &policy,
        n_steps,
        &rule,
    )
    .unwrap();
    let prot = greedy_attack_on_image(
        &protected,
        &prot_eval,
        &model.input_scale,
        &policy,
        n_steps,
        &rule,
    )
    .unwrap();

    let steps = base.trace.len().min(prot.trace.len());
    assert!(steps > 0);
    for i in 0..steps {
        assert!(
            prot.trace[i] <= base.trace[i],
            "step {i}: protected {} > baseline {}",
            prot.trace[i],
            base.trace[i]
        );
    }
    let threshold = rule.absolute.max(rule.relative * 1.0);
    let crossing = |trace: &[f64]| trace.iter().position(|&m| m > threshold);
    let base_cross = crossing(&base.trace);
    let prot_cross = crossing(&prot.trace);
    let base_step = base_cross.expect("baseline must cross the failure rule");
    if let Some(p) = prot_cross {
        assert!(base_step < p, "baseline crossed at {base_step}, protected at {p}");
    }
    println!(
        "PASS greedy-resistance: {} paired steps, protected trace dominated everywhere; baseline crossed at step {}, protected {} in {:.1?}",
        steps,
        base_step + 1,
        prot_cross.map_or("never".to_string(), |p| format!("at step {}", p + 1)),
        t0.elapsed()
    );
}

#[test]
fn column_attack_cost_inflation() {
    let t0 = Instant::now();
    // algebraic equivalence in full precision, scale-aware 1e-9
    let d = 64;
    let w = random_matrix(d, 24, 50);
    let x = random_matrix(8, d, 51);
    let wy = wy_on_channels(d, &spread_channels(d, 4));
    let w_rot = ror_core::linalg::apply_wy_transpose_left(&w, &wy).unwrap();
    let mut worst_alg = 0.0f64;
    for (r, c, delta) in [(3usize, 5usize, 1.0f64), (40, 0, -7.5), (63, 23, 120.0)] {
        let pert = column_perturbation(&wy, r, delta).unwrap();
        let mut attacked = w_rot.clone();
        for j in 0..d {
            attacked.set(j, c, attacked.get(j, c) + pert[j]);
        }
        let got = apply_wy_right(&x, &wy).unwrap().matmul(&attacked).unwrap();
        let mut want = x.matmul(&w).unwrap();
        for i in 0..x.rows() {
            want.set(i, c, want.get(i, c) + delta * x.get(i, r));
        }
        let scale = 1.0 + want.max_abs() + delta.abs() * x.max_abs();
        let rel = got.sub(&want).unwrap().max_abs() / scale;
        assert!(rel <= 1e-9, "algebra deviation {rel}");
        worst_alg = worst_alg.max(rel);
    }

    // stored-bit cost on bf16 layers grows linearly in d; the baseline
    // single-flip replication costs exactly one bit
    let quant_bits = 8.0f64; // Eq.-2 quantization width anchoring Table III's ratio
    let ds = [64usize, 128, 256, 512];
    let mut hams = Vec::new();
    for &d in &ds {
        let w = scaled_random_matrix(d, d, 60 + d as u64, 1.0 / (d as f64).sqrt());
        let q = quantize(&w, ScaleMode::PerTensor, Dtype::Bf16);
        let channels = spread_channels(d, 8);
        let cfg = DefenseConfig {
            requantize_fused: true,
            ..DefenseConfig::default()
        };
        let layer = fuse_quantized(&q, wy_on_channels(d, &channels), &cfg, 0).unwrap();
        let fused = match &layer.fused {
            FusedWeights::Quantized(t) => t.clone(),
            _ => unreachable!(),
        };
        let r = channels[0];
        let (mut c, mut best) = (0usize, f64::NEG_INFINITY);
        for j in 0..d {
            let v = fused.dequant_at(r, j);
            if v > best {
                best = v;
                c = j;
            }
        }
        let word = fused.word_at(r, c);
        let delta = bf16_decode(word ^ (1 << 14)) - bf16_decode(word);
        let atk = spfa_column_attack(&layer, r, c, delta).unwrap();
        assert!(atk.outcome.hamming_cost > 1);
        hams.push(atk.outcome.hamming_cost as f64);

        // baseline: identity rotation degenerates to the single-bit flip
        let base_layer = ProtectedLayer::unprotected(0, &q);
        let base_word = q.word_at(r, c);
        let base_delta = bf16_decode(base_word ^ (1 << 14)) - bf16_decode(base_word);
        let base_atk = spfa_column_attack(&base_layer, r, c, base_delta).unwrap();
        assert_eq!(base_atk.outcome.hamming_cost, 1, "baseline attack at d={d}");
        assert_eq!(base_atk.changed_elements, 1);
    }
    for win in hams.windows(2) {
        assert!(win[1] > win[0], "hamming cost must grow with d: {hams:?}");
    }
    let n = ds.len() as f64;
    let mean_d = ds.iter().sum::<usize>() as f64 / n;
    let mean_h = hams.iter().sum::<f64>() / n;
    let slope = ds
        .iter()
        .zip(&hams)
        .map(|(&d, &h)| (d as f64 - mean_d) * (h - mean_h))
        .sum::<f64>()
        / ds.iter().map(|&d| (d as f64 - mean_d).powi(2)).sum::<f64>();
    assert!(
        slope >= 0.5 * quant_bits,
        "slope {slope:.2} bits/row below 0.5 * {quant_bits}"
    );
    println!(
        "PASS column-attack: algebra deviation {:.3e} (tol 1e-9); hamming costs {:?} over d {:?}, slope {:.2} bits/row (need >= {:.1}), baseline cost 1 in {:.1?}",
        worst_alg,
        hams.iter().map(|h| *h as u64).collect::<Vec<_>>(),
        ds,
        slope,
        0.5 * quant_bits,
        t0.elapsed()
    );
}

#[test]
fn flop_overhead_stays_below_one_percent() {
    let t0 = Instant::now();
    // square and MLP-expansion shapes; the correction stays sparse
    // (m well under d_in) as in the deployment regime
    let shapes = [
        (256usize, 256usize),
        (256, 1024),
        (320, 256),
        (512, 512),
        (1024, 1024),
        (1024, 4096),
        (2048, 2048),
        (4096, 4096),
        (4096, 11008),
        (8192, 8192),
        (11008, 4096),
    ];
    let mut checked = 0;
    let mut worst = 0.0f64;
    for &(d_in, d_out) in &shapes {
        for m in [0usize, 1, 2, 5, 8, 16, 20, 32, 44] {
            for b in [1usize, 16, 512] {
                if m as f64 / d_out as f64 <= 0.005 {
                    let r = flop_overhead(d_in, d_out, m, b);
                    assert!(r < 0.01, "ratio {r} at d_in={d_in} d_out={d_out} m={m}");
                    // batch independence
                    assert_eq!(r, flop_overhead(d_in, d_out, m, 1));
                    worst = worst.max(r);
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(flop_overhead(4096, 4096, 0, 16), 0.0);
    println!(
        "PASS flop-overhead: {checked} configurations with m/d_out <= 0.005, worst ratio {:.5} (< 0.01) in {:.1?}",
        worst,
        t0.elapsed()
    );
}

#[test]
fn bit_exactness_and_determinism() {
    let t0 = Instant::now();
    // container round trip: byte-identical, stored words hamming 0
    let mut container = RortContainer::new();
    let w = random_matrix(24, 16, 70);
    let qi = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
    let qb = quantize(&w, ScaleMode::PerTensor, Dtype::Bf16);
    container.push("int8", TensorPayload::Quantized(qi.clone())).unwrap();
    container.push("bf16", TensorPayload::Quantized(qb.clone())).unwrap();
    container.push("full", TensorPayload::F32(w)).unwrap();
    let bytes = to_bytes(&container).unwrap();
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&back).unwrap(), bytes);
    let TensorPayload::Quantized(qi2) = &back.get("int8").unwrap().payload else {
        panic!()
    };
    let TensorPayload::Quantized(qb2) = &back.get("bf16").unwrap().payload else {
        panic!()
    };
    assert_eq!(hamming_distance(&qi, qi2).unwrap(), 0);
    assert_eq!(hamming_distance(&qb, qb2).unwrap(), 0);

    // single flips change exactly one stored bit
    for bit in 0..8 {
        let loc = FlipLocation { layer: 0, row: 3, col: 2, bit };
        let (flipped, _) = flip_bit(&qi, &loc).unwrap();
        assert_eq!(hamming_distance(&qi, &flipped).unwrap(), 1);
    }

    // Monte Carlo byte-identical across reruns and worker counts
    let model = spof_model();
    let eval = make_eval_set(&model.image, &model.input_scale, 32, 777).unwrap();
    let rule = FailureRule::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let report = pool.install(|| {
            monte_carlo(&model.image, &eval, 3e-4, 64, 5000, &rule).unwrap()
        });
        serde_json::to_vec(&report).unwrap()
    };
    let a = run(1);
    let b = run(4);
    let c = run(4);
    assert_eq!(a, b, "worker count changed the report bytes");
    assert_eq!(b, c, "rerun changed the report bytes");
    println!(
        "PASS bit-exactness: container round trip byte-identical ({} bytes); flip hamming == 1; {}-byte reports identical across reruns and 1/4 workers in {:.1?}",
        bytes.len(),
        a.len(),
        t0.elapsed()
    );
}

#[test]
fn alpha_sweep_monotone_and_protective() {
    let t0 = Instant::now();
    let model = spof_model();
    let alphas = [50.0, 9.0, 6.0, 3.0];
    let policy = CandidatePolicy {
        kind: PolicyKind::ActivationWeighted,
        top_k: 16,
        bits: Vec::new(),
    };
    let rows = alpha_sweep(
        &model,
        &alphas,
        &DefenseConfig::default(),
        &ProtectOptions::default(),
        &policy,
        8,
        64,
        777,
        &FailureRule::default(),
    )
    .unwrap();
    // counts non-increasing in alpha (rows are ordered by decreasing alpha)
    for win in rows.windows(2) {
        assert!(win[0].alpha > win[1].alpha);
        assert!(
            win[0].reflectors <= win[1].reflectors,
            "reflector count increased with alpha: {:?}",
            rows.iter().map(|r| (r.alpha, r.reflectors)).collect::<Vec<_>>()
        );
    }
    let unflagged = rows.iter().find(|r| r.reflectors == 0).expect("an alpha with no flags");
    let flagged = rows
        .iter()
        .find(|r| (r.alpha - 6.0).abs() < 1e-12)
        .expect("alpha 6 row");
    assert!(flagged.reflectors > 0, "alpha=6 must protect the planted model");
    assert!(
        flagged.post_attack_metric < unflagged.post_attack_metric,
        "flagged {} !< unflagged {}",
        flagged.post_attack_metric,
        unflagged.post_attack_metric
    );
    println!(
        "PASS alpha-sweep: counts {:?}; post-attack metric {:.2} (alpha 6) < {:.3e} (unprotected) in {:.1?}",
        rows.iter().map(|r| (r.alpha, r.reflectors)).collect::<Vec<_>>(),
        flagged.post_attack_metric,
        unflagged.post_attack_metric,
        t0.elapsed()
    );
}
