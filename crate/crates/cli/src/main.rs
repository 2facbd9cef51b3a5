//! `ror` — build, protect, attack and evaluate toy quantized models.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config schema,
//! failed verification), 2 internal error.

mod model_io;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use model_io::{
    baseline_weights, load_model, parse_outlier_spec, save_baseline, save_protected, sidecar_path,
    to_protected_layers, write_json,
};
use ror_core::attack::{
    random_ber_attack, spfa_locate, CandidatePolicy, FailureRule, LocateOutcome,
};
use ror_core::config::RunConfig;
use ror_core::defense::{
    build_rotation, calibrate_layer, fuse_quantized, verify_lossless, DefenseConfig, FusedWeights,
};
use ror_core::error::Error;
use ror_core::harness::{
    build_toy_model, collect_calibration, greedy_attack_on_image, make_eval_set, monte_carlo,
    proxy_metric, EvalSet, ModelImage, ProtectOptions,
};
use ror_core::quant::QuantizedTensor;
use ror_core::stats::ChannelStats;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ror",
    version,
    about = "Rotation defense pipeline for bit-flip fault studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy model with optional planted outliers.
    GenModel {
        /// Comma-separated layer dims, e.g. 320,256,128
        #[arg(long)]
        dims: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Planted outlier as layer:channel:magnitude (repeatable)
        #[arg(long = "outlier")]
        outliers: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Phase 1: collect activation stats and flag outlier channels.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Phases 2+3: build rotations from stats and fuse them into the weights.
    Protect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fault-injection attacks against a stored model.
    Attack {
        #[command(subcommand)]
        mode: AttackMode,
    },
    /// Paired baseline/protected Monte Carlo under random bit flips.
    Evaluate {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        protected: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write <stem>-baseline.csv and <stem>-protected.csv
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Outlier-threshold ablation: reflector count and post-attack metric
    /// per alpha.
    SweepAlpha {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated alphas, e.g. 50,9,6,3
        #[arg(long)]
        alphas: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check that the protected model reproduces the baseline outputs.
    Verify {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        protected: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttackMode {
    /// Independent per-bit flips at the configured BER, one outcome per seed.
    Random {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Progressive greedy bit search under the configured candidate policy.
    Greedy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Find a failing random seed and bisect it to a single fatal flip.
    Spfa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Stats document produced by `calibrate` and consumed by `protect`.
#[derive(Debug, Serialize, Deserialize)]
struct StatsDoc {
    alpha: f64,
    m_max: Option<usize>,
    layers: Vec<ChannelStats>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => {}
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn defense_config(cfg: &RunConfig) -> DefenseConfig {
    DefenseConfig {
        alpha: cfg.alpha,
        m_max: cfg.m_max,
        lossless_tol: cfg.lossless_tol.unwrap_or(1e-9),
        requantize_fused: cfg.requantize_fused,
    }
}

fn protect_options(cfg: &RunConfig) -> ProtectOptions {
    ProtectOptions {
        calib_batches: cfg.calib_batches,
        calib_tokens: cfg.calib_tokens,
        calib_seed: cfg.calib_seed,
        layer_opt_outs: cfg.layer_opt_outs.clone(),
    }
}

fn policy(cfg: &RunConfig) -> CandidatePolicy {
    CandidatePolicy {
        kind: cfg.policy,
        top_k: cfg.top_k,
        bits: Vec::new(),
    }
}

fn rule(cfg: &RunConfig) -> FailureRule {
    FailureRule {
        absolute: cfg.failure_absolute,
        relative: cfg.failure_relative,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenModel {
            dims,
            seed,
            outliers,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let dims: Vec<usize> = dims
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad dims list {dims:?}")))?;
            let planted = outliers
                .iter()
                .map(|s| parse_outlier_spec(s))
                .collect::<Result<Vec<_>, _>>()?;
            let model = build_toy_model(&dims, seed, &planted, cfg.dtype, cfg.scale_mode)?;
            save_baseline(&output, &model)?;
            println!(
                "wrote {} ({} layers, dims {:?}, {} planted outliers)",
                output.display(),
                model.image.n_layers(),
                model.dims,
                planted.len()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Calibrate {
            model,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let dcfg = defense_config(&cfg);
            let opts = protect_options(&cfg);
            let activations = collect_calibration(&loaded.image, &loaded.input_scale, &opts)?;
            let mut layers = Vec::with_capacity(activations.len());
            for x in &activations {
                layers.push(calibrate_layer(x, &dcfg)?);
            }
            let doc = StatsDoc {
                alpha: cfg.alpha,
                m_max: cfg.m_max,
                layers,
            };
            write_json(&output, &doc)?;
            let flagged: usize = doc.layers.iter().map(|l| l.outliers.len()).sum();
            println!(
                "wrote {} ({} layers, {} outlier channels at alpha {})",
                output.display(),
                doc.layers.len(),
                flagged,
                cfg.alpha
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Protect {
            model,
            stats,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let text = std::fs::read_to_string(&stats)
                .map_err(|e| Error::Io(format!("{}: {e}", stats.display())))?;
            let doc: StatsDoc = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", stats.display())))?;
            if doc.layers.len() != loaded.image.n_layers() {
                return Err(Error::Config(format!(
                    "stats cover {} layers but the model has {}",
                    doc.layers.len(),
                    loaded.image.n_layers()
                )));
            }
            let dcfg = defense_config(&cfg);
            let mut layers = Vec::with_capacity(doc.layers.len());
            for (i, stats) in doc.layers.iter().enumerate() {
                let mut stats = stats.clone();
                if cfg.layer_opt_outs.contains(&i) {
                    stats.outliers.clear();
                }
                let wy = build_rotation(&stats)?;
                layers.push(fuse_quantized(&loaded.image.tensors[i], wy, &dcfg, i)?);
            }
            let protected_count: usize = layers.iter().map(|l| l.wy.m()).sum();
            save_protected(
                &output,
                &layers,
                cfg.alpha,
                cfg.requantize_fused,
                &loaded.sidecar,
            )?;
            println!(
                "wrote {} ({} reflectors across {} layers; sidecar {})",
                output.display(),
                protected_count,
                layers.len(),
                sidecar_path(&output).display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Attack { mode } => attack(mode),

        Command::Evaluate {
            baseline,
            protected,
            config,
            output,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let base = load_model(&baseline)?;
            let prot = load_model(&protected)?;
            let frule = rule(&cfg);
            let base_eval =
                make_eval_set(&base.image, &base.input_scale, cfg.probe_tokens, cfg.probe_seed)?;
            let prot_eval =
                make_eval_set(&prot.image, &prot.input_scale, cfg.probe_tokens, cfg.probe_seed)?;
            let base_report = monte_carlo(
                &base.image,
                &base_eval,
                cfg.ber,
                cfg.trials,
                cfg.base_seed,
                &frule,
            )?;
            let prot_report = monte_carlo(
                &prot.image,
                &prot_eval,
                cfg.ber,
                cfg.trials,
                cfg.base_seed,
                &frule,
            )?;
            #[derive(Serialize)]
            struct Paired<'a> {
                baseline: &'a ror_core::harness::EvalReport,
                protected: &'a ror_core::harness::EvalReport,
            }
            write_json(
                &output,
                &Paired {
                    baseline: &base_report,
                    protected: &prot_report,
                },
            )?;
            if let Some(stem) = csv {
                for (suffix, report) in [("baseline", &base_report), ("protected", &prot_report)] {
                    let path = stem.with_file_name(format!(
                        "{}-{}.csv",
                        stem.file_name().unwrap_or_default().to_string_lossy(),
                        suffix
                    ));
                    std::fs::write(&path, report.to_csv_string()?)
                        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                }
            }
            println!(
                "baseline: fail_rate {:.4} mean {:.4} max {:.4}",
                base_report.fail_rate, base_report.mean_metric, base_report.max_metric
            );
            println!(
                "protected: fail_rate {:.4} mean {:.4} max {:.4}",
                prot_report.fail_rate, prot_report.mean_metric, prot_report.max_metric
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::SweepAlpha {
            model,
            alphas,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let alphas: Vec<f64> = alphas
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad alphas list {alphas:?}")))?;
            // re-protects from scratch per alpha, so rebuild the generator
            // model from the sidecar metadata
            let toy = build_toy_model(
                &loaded.sidecar.dims,
                loaded.sidecar.seed,
                &loaded.sidecar.planted,
                loaded.sidecar.dtype,
                loaded.sidecar.scale_mode,
            )?;
            let rows = ror_core::harness::alpha_sweep(
                &toy,
                &alphas,
                &defense_config(&cfg),
                &protect_options(&cfg),
                &policy(&cfg),
                cfg.n_flips,
                cfg.probe_tokens,
                cfg.probe_seed,
                &rule(&cfg),
            )?;
            let mut out = String::from("alpha,reflectors,post_attack_metric\n");
            for r in &rows {
                out.push_str(&format!(
                    "{},{},{}\n",
                    r.alpha, r.reflectors, r.post_attack_metric
                ));
            }
            std::fs::write(&output, out)
                .map_err(|e| Error::Io(format!("{}: {e}", output.display())))?;
            for r in &rows {
                println!(
                    "alpha {:>6}: {} reflectors, post-attack metric {:.4}",
                    r.alpha, r.reflectors, r.post_attack_metric
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Verify {
            baseline,
            protected,
            config,
        } => {
            let cfg = load_config(&config)?;
            let base = load_model(&baseline)?;
            let prot = load_model(&protected)?;
            if base.image.n_layers() != prot.image.n_layers() {
                return Err(Error::Config("layer counts differ".into()));
            }
            let weights = baseline_weights(&base);
            let layers = to_protected_layers(&prot);
            // per-layer probes come from the baseline's own activations
            let opts = ProtectOptions {
                calib_batches: 1,
                calib_tokens: cfg.probe_tokens,
                calib_seed: cfg.probe_seed,
                layer_opt_outs: Vec::new(),
            };
            let probes = collect_calibration(&base.image, &base.input_scale, &opts)?;
            let mut worst = 0.0f64;
            let mut all_pass = true;
            for (i, layer) in layers.iter().enumerate() {
                let tol = cfg.lossless_tol.unwrap_or_else(|| match &layer.fused {
                    FusedWeights::Quantized(q) => {
                        if layer.wy.m() == 0 {
                            // untouched layer: must match bit for bit
                            1e-12
                        } else {
                            let max_scale =
                                q.scales().iter().cloned().fold(0.0f32, f32::max) as f64;
                            2.0 * max_scale * q.rows() as f64
                        }
                    }
                    FusedWeights::Full(_) => 1e-5,
                });
                let report = verify_lossless(&weights[i], layer, &probes[i], tol)?;
                println!(
                    "layer{i}: deviation {:.3e} tol {:.3e} -> {}",
                    report.max_rel_dev,
                    report.tol,
                    if report.pass { "pass" } else { "FAIL" }
                );
                worst = worst.max(report.max_rel_dev);
                all_pass &= report.pass;
            }
            println!(
                "verify: {} (worst deviation {:.3e})",
                if all_pass { "pass" } else { "FAIL" },
                worst
            );
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn clean_metric_fn<'a>(
    image: &'a ModelImage,
    eval: &'a EvalSet,
) -> impl Fn(&[QuantizedTensor]) -> f64 + 'a {
    move |ts: &[QuantizedTensor]| proxy_metric(image, ts, eval)
}

fn attack(mode: AttackMode) -> Result<ExitCode, Error> {
    match mode {
        AttackMode::Random {
            model,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let eval = make_eval_set(
                &loaded.image,
                &loaded.input_scale,
                cfg.probe_tokens,
                cfg.probe_seed,
            )?;
            let metric = clean_metric_fn(&loaded.image, &eval);
            let frule = rule(&cfg);
            // append-only resume: trials already on disk are kept
            let done = count_jsonl_lines(&output)?;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&output)
                .map_err(|e| Error::Io(format!("{}: {e}", output.display())))?;
            for i in done..cfg.trials {
                let out = random_ber_attack(
                    &loaded.image.tensors,
                    cfg.ber,
                    cfg.base_seed + i as u64,
                    &metric,
                    &frule,
                )?;
                let line = serde_json::to_string(&out).map_err(|e| Error::Io(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::Io(e.to_string()))?;
            }
            println!(
                "wrote {} ({} new trials, {} total)",
                output.display(),
                cfg.trials.saturating_sub(done),
                cfg.trials.max(done)
            );
            Ok(ExitCode::SUCCESS)
        }

        AttackMode::Greedy {
            model,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let eval = make_eval_set(
                &loaded.image,
                &loaded.input_scale,
                cfg.probe_tokens,
                cfg.probe_seed,
            )?;
            let search = greedy_attack_on_image(
                &loaded.image,
                &eval,
                &loaded.input_scale,
                &policy(&cfg),
                cfg.n_flips,
                &rule(&cfg),
            )?;
            let line = serde_json::to_string(&search).map_err(|e| Error::Io(e.to_string()))?;
            std::fs::write(&output, line + "\n")
                .map_err(|e| Error::Io(format!("{}: {e}", output.display())))?;
            println!(
                "greedy: {} flips, metric {:.4} -> {:.4}{}",
                search.outcome.flips.len(),
                search.outcome.metric_before,
                search.outcome.metric_after,
                if search.outcome.failed { " (failed)" } else { "" }
            );
            Ok(ExitCode::SUCCESS)
        }

        AttackMode::Spfa {
            model,
            config,
            output,
        } => {
            let cfg = load_config(&config)?;
            let loaded = load_model(&model)?;
            let eval = make_eval_set(
                &loaded.image,
                &loaded.input_scale,
                cfg.probe_tokens,
                cfg.probe_seed,
            )?;
            let metric = clean_metric_fn(&loaded.image, &eval);
            let frule = rule(&cfg);
            let mut file = std::fs::File::create(&output)
                .map_err(|e| Error::Io(format!("{}: {e}", output.display())))?;
            for i in 0..cfg.trials {
                let seed = cfg.base_seed + i as u64;
                let out =
                    random_ber_attack(&loaded.image.tensors, cfg.ber, seed, &metric, &frule)?;
                if !out.failed {
                    continue;
                }
                let located = spfa_locate(
                    &loaded.image.tensors,
                    &out.flips,
                    &metric,
                    &frule,
                    out.metric_before,
                )?;
                #[derive(Serialize)]
                struct SpfaRecord<'a> {
                    seed: u64,
                    trial_flips: usize,
                    located: &'a LocateOutcome,
                }
                let rec = SpfaRecord {
                    seed,
                    trial_flips: out.flips.len(),
                    located: &located,
                };
                let line = serde_json::to_string(&rec).map_err(|e| Error::Io(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::Io(e.to_string()))?;
                match &located {
                    LocateOutcome::Isolated { flip, evaluations } => println!(
                        "seed {seed}: isolated fatal flip layer {} row {} col {} bit {} in {evaluations} evaluations",
                        flip.layer, flip.row, flip.col, flip.bit
                    ),
                    LocateOutcome::NonIsolable { evaluations } => println!(
                        "seed {seed}: failure needs interacting flips ({evaluations} evaluations)"
                    ),
                }
                return Ok(ExitCode::SUCCESS);
            }
            println!(
                "no failing seed among {} trials at ber {}",
                cfg.trials, cfg.ber
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn count_jsonl_lines(path: &PathBuf) -> Result<usize, Error> {
    match std::fs::File::open(path) {
        Ok(f) => Ok(std::io::BufReader::new(f).lines().count()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(Error::Io(format!("{}: {e}", path.display()))),
    }
}
