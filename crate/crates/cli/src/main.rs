//! `ssm-ptq`: calibrate, analyze, quantize, ablate and evaluate selective
//! state-space language models from the command line.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on a data error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ssm_ptq::harness::{
    ablation_experiment, build_hooks, calibrate, evaluate_fidelity, load_candidate, make_outlier_model,
    pick_outlier_channels, reports_to_json, run_grid, save_quantized, AblationScope, Baseline, Corpus,
    FidelityReport, QuantConfig, Scope, WeightGranularity,
};
use ssm_ptq::mamba::{MambaModel, ModelConfig};
use ssm_ptq::outlier::{detect_all, CalibrationStats, OutlierReport, StatBasis, DEFAULT_SIGMA_MULT};
use ssm_ptq::quant::Bits;
use ssm_ptq::{load_model, save_model, Execution};

const THREADS_VAR: &str = "SSM_PTQ_THREADS";

#[derive(Parser)]
#[command(name = "ssm-ptq", version, about = "Post-training quantization for selective SSM language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model archive (.sptq).
    #[arg(long)]
    model: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TokenArgs {
    /// Raw little-endian u32 token ids.
    #[arg(long)]
    tokens: PathBuf,
    /// Tokens per sequence when cutting the stream.
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Basis {
    ChannelAbsmax,
    Activations,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    PerChannel,
    PerTensor,
}

#[derive(Subcommand)]
enum Command {
    /// Record per-channel statistics at every tap over a corpus.
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flag outlier channels per tap; also writes per-channel absmax as CSV.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA_MULT, allow_negative_numbers = true)]
        sigma: f32,
        #[arg(long, value_enum, default_value_t = Basis::ChannelAbsmax)]
        basis: Basis,
        #[arg(long)]
        out: PathBuf,
        /// CSV destination; defaults to `--out` with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Quantize weights, fold smoothing and write a quantized archive.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_bits)]
        wbits: Bits,
        #[arg(long, value_parser = parse_bits)]
        abits: Option<Bits>,
        #[arg(long, default_value = "mlp")]
        scope: Scope,
        /// Smoothing migration strength in [0, 1].
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f32>,
        #[arg(long, value_enum, default_value_t = Weights::PerChannel)]
        weights: Weights,
        /// Zero detected outlier channels before quantizing.
        #[arg(long)]
        ablate: bool,
        #[arg(long, default_value = "all")]
        ablate_scope: AblationScope,
        #[arg(long, default_value_t = DEFAULT_SIGMA_MULT, allow_negative_numbers = true)]
        sigma: f32,
        /// Calibration statistics; required with --abits, --alpha or --ablate.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero outlier channels versus equal-count random channels.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        outliers: PathBuf,
        #[arg(long, default_value = "all")]
        scope: AblationScope,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a candidate archive against the float baseline.
    Eval {
        /// Float baseline archive.
        #[arg(long = "model", alias = "baseline")]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Quantized (or any float) archive with the same config.
        #[arg(long)]
        candidate: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a list of configurations against one baseline.
    Grid {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tokens: TokenArgs,
        /// JSON array of configurations; defaults to the standard grid.
        #[arg(long)]
        configs: Option<PathBuf>,
        /// Leading fraction of sequences used for calibration.
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        calib_frac: f64,
        /// Record wall time per cell (makes the output non-reproducible).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a reports file as a table.
    Report {
        #[arg(long)]
        reports: PathBuf,
    },
    /// Write a random toy model with injected outlier channels.
    Synth {
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long)]
        d_state: Option<usize>,
        #[arg(long)]
        d_conv: Option<usize>,
        #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
        outlier_frac: f64,
        #[arg(long, default_value_t = 50.0, allow_negative_numbers = true)]
        magnitude: f32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Model archive to write.
        #[arg(long, alias = "model")]
        out: PathBuf,
        /// Config JSON to write.
        #[arg(long)]
        config: PathBuf,
        /// Also write a uniform random token file.
        #[arg(long)]
        tokens_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        n_tokens: usize,
    },
}

/// A flag combination that parses but makes no sense; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn parse_bits(s: &str) -> Result<Bits, String> {
    s.parse::<u8>()
        .map_err(|_| format!("{s:?} is not a bit width"))
        .and_then(|b| Bits::try_from(b).map_err(|e| e.to_string()))
}

fn load(args: &ModelArgs) -> Result<MambaModel> {
    Ok(load_model(&args.model, &args.config)?)
}

fn load_tokens(args: &TokenArgs, model: &MambaModel) -> Result<Corpus> {
    if args.seq_len == 0 {
        return usage("--seq-len must be positive");
    }
    Ok(Corpus::load(&args.tokens, args.seq_len, model.config.vocab_size)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_stats(path: &Path, model: &MambaModel) -> Result<CalibrationStats> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stats = CalibrationStats::from_json(&text, path)?;
    // widths of every tap, from a one-token pass
    let expected = calibrate(model, &Corpus::new(vec![vec![0]]), Execution::Sequential)?;
    for (tap, s) in &stats.taps {
        match expected.get(*tap) {
            None => anyhow::bail!("{}: tap {tap} does not exist in this model", path.display()),
            Some(e) if e.n_channels != s.n_channels => anyhow::bail!(
                "{}: tap {tap} has {} channels, model has {}",
                path.display(),
                s.n_channels,
                e.n_channels
            ),
            _ => {}
        }
    }
    Ok(stats)
}

fn check_sigma(sigma: f32) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        usage(format!("--sigma must be positive and finite, got {sigma}"))
    }
}

fn absmax_csv(reports: &[OutlierReport]) -> String {
    let mut s = String::from("tap,channel,absmax,outlier\n");
    for r in reports {
        for (c, a) in r.channel_absmax.iter().enumerate() {
            let flag = r.outlier_channels.binary_search(&c).is_ok() as u8;
            s.push_str(&format!("{},{c},{a},{flag}\n", r.tap));
        }
    }
    s
}

fn table(reports: &[FidelityReport]) -> String {
    let mut s = String::from("| config | scope | alpha | ablate | mse | cosine | max_abs | top1 |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let c = &r.config;
        let alpha = c.smooth_alpha.map_or("-".to_string(), |a| a.to_string());
        let m = &r.metrics;
        s.push_str(&format!(
            "| {} | {} | {alpha} | {} | {:.4e} | {:.6} | {:.4e} | {:.4} |\n",
            c.notation(),
            c.scope,
            c.ablate_outliers,
            m.mse,
            m.cosine,
            m.max_abs,
            m.top1_agreement
        ));
    }
    s
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate { model, tokens, out } => {
            let m = load(&model)?;
            let corpus = load_tokens(&tokens, &m)?;
            let stats = calibrate(&m, &corpus, Execution::Sequential)?;
            write(&out, &stats.to_json())?;
            println!("recorded {} taps over {} tokens", stats.taps.len(), corpus.n_tokens());
        }
        Command::Analyze { model, stats, sigma, basis, out, csv } => {
            check_sigma(sigma)?;
            let m = load(&model)?;
            let stats = load_stats(&stats, &m)?;
            let basis = match basis {
                Basis::ChannelAbsmax => StatBasis::ChannelAbsmax,
                Basis::Activations => StatBasis::Activations,
            };
            let reports = detect_all(&stats, sigma, basis)?;
            write(&out, &pretty(&reports))?;
            write(&csv.unwrap_or_else(|| out.with_extension("csv")), &absmax_csv(&reports))?;
            for r in reports.iter().filter(|r| !r.outlier_channels.is_empty()) {
                println!("{}: {} outlier(s) {:?}", r.tap, r.outlier_channels.len(), r.outlier_channels);
            }
        }
        Command::Quantize {
            model,
            wbits,
            abits,
            scope,
            alpha,
            weights,
            ablate,
            ablate_scope,
            sigma,
            stats,
            out,
        } => {
            check_sigma(sigma)?;
            let cfg = QuantConfig {
                wbits: Some(wbits),
                abits,
                scope,
                smooth_alpha: alpha,
                ablate_outliers: ablate,
                ablate_scope,
                sigma_mult: sigma,
                weights: match weights {
                    Weights::PerChannel => WeightGranularity::PerChannel,
                    Weights::PerTensor => WeightGranularity::PerTensor,
                },
            };
            let cfg = match cfg.validated() {
                Ok(c) => c,
                Err(e) => return usage(e.to_string()),
            };
            let m = load(&model)?;
            let stats = match (&stats, cfg.needs_stats()) {
                (Some(p), _) => Some(load_stats(p, &m)?),
                (None, true) => return usage("--stats is required with --abits, --alpha or --ablate"),
                (None, false) => None,
            };
            let q = build_hooks(&cfg, &m, stats.as_ref())?;
            save_quantized(&q, &out)?;
            println!("{cfg}: {} quantized tensors, {} activation taps", q.weights.len(), q.act_scales.len());
        }
        Command::Ablate { model, outliers, scope, tokens, seed, out } => {
            let m = load(&model)?;
            let reports: Vec<OutlierReport> = read_json(&outliers)?;
            let corpus = load_tokens(&tokens, &m)?;
            let baseline = Baseline::compute(&m, &corpus, Execution::Sequential)?;
            let r = ablation_experiment(&m, &baseline, &reports, scope, seed, Execution::Sequential)
                .with_context(|| format!("ablation with {}", outliers.display()))?;
            if let Some(out) = out {
                write(&out, &pretty(&r))?;
            }
            println!("zeroed {} channel(s) per arm at scope {scope}", r.n_zeroed);
            println!(
                "top1 agreement: outliers {:.4}, random {:.4}, delta {:+.4}",
                r.outlier.top1_agreement, r.random.top1_agreement, r.top1_delta
            );
            println!("cosine: outliers {:.6}, random {:.6}", r.outlier.cosine, r.random.cosine);
        }
        Command::Eval { model, config, candidate, tokens, out } => {
            let m = load_model(&model, &config)?;
            let cand = load_candidate(&candidate, &config)?;
            let corpus = load_tokens(&tokens, &m)?;
            let fid = evaluate_fidelity(&m, &cand.model, &cand.hooks, &corpus, Execution::Sequential)?;
            let report = FidelityReport {
                config: cand.config.unwrap_or_else(QuantConfig::fp),
                metrics: fid.metrics,
                per_layer: fid.per_layer,
                outliers: None,
                smoothing: cand.smoothing,
                runtime_ms: None,
            };
            write(&out, &pretty(&report))?;
            print!("{}", table(std::slice::from_ref(&report)));
        }
        Command::Grid { model, tokens, configs, calib_frac, timing, out } => {
            if !(calib_frac > 0.0 && calib_frac < 1.0) {
                return usage(format!("--calib-frac must lie strictly between 0 and 1, got {calib_frac}"));
            }
            let m = load(&model)?;
            let corpus = load_tokens(&tokens, &m)?;
            let (calib, eval) = corpus
                .split(calib_frac)
                .with_context(|| format!("splitting {}", tokens.tokens.display()))?;
            let configs = match &configs {
                Some(p) => read_json::<Vec<QuantConfig>>(p)?,
                None => QuantConfig::standard_grid(),
            };
            let exec = Execution::from_env(THREADS_VAR);
            let reports = run_grid(&m, &calib, &eval, &configs, exec, timing)?;
            write(&out, &reports_to_json(&reports))?;
            print!("{}", table(&reports));
        }
        Command::Report { reports } => {
            let reports: Vec<FidelityReport> = read_json(&reports)?;
            print!("{}", table(&reports));
        }
        Command::Synth {
            d_model,
            layers,
            vocab,
            d_state,
            d_conv,
            outlier_frac,
            magnitude,
            seed,
            out,
            config,
            tokens_out,
            n_tokens,
        } => {
            let mut c = ModelConfig::new(layers, d_model, vocab);
            if let Some(n) = d_state {
                c.d_state = n;
            }
            if let Some(k) = d_conv {
                c.d_conv = k;
            }
            let c = match c.validated() {
                Ok(c) => c,
                Err(e) => return usage(e.to_string()),
            };
            if !(outlier_frac > 0.0 && outlier_frac <= 1.0) {
                return usage(format!("--outlier-frac must lie in (0, 1], got {outlier_frac}"));
            }
            if !(magnitude >= 1.0 && magnitude.is_finite()) {
                return usage(format!("--magnitude must be at least 1, got {magnitude}"));
            }
            let channels = pick_outlier_channels(c.d_inner, outlier_frac, seed)?;
            let m = make_outlier_model(c, &channels, magnitude, seed)?;
            save_model(&m, &out, &config)?;
            if let Some(p) = tokens_out {
                if n_tokens == 0 {
                    return usage("--n-tokens must be positive");
                }
                Corpus::synthetic(vocab, 1, n_tokens, seed ^ 0x5eed).save(&p)?;
            }
            print!("{}", pretty(&serde_json::json!({ "outlier_channels": channels })));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
