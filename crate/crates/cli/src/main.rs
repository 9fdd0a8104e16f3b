//! `lqnt`: logarithmic quantization toolkit CLI.
//!
//! Subcommands: `quantize` (.lqta -> .lqnm), `dequantize` (.lqnm -> .lqta),
//! `inspect` (either format), `compare` (codec error comparison), and
//! `train-toy` (error-feedback retraining demo on a synthetic task).
//!
//! Exit codes: 0 success, 1 usage, 2 format/IO, 3 degenerate data,
//! 4 training failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lqnt_core::container::{compression_report, write_model_with_threads};
use lqnt_core::retrain::{gen_synthetic_task, quantize_then_eval, retrain, ToyModel, TrainConfig};
use lqnt_core::scale::em_fit_scale;
use lqnt_core::{
    dequantize_model, encode, linear_encode, max_scale, quantization_sse, read_model,
    tensor_stats, ActScaleMode, Error, QuantConfig, ScaleStrategy, TensorArchive,
};

#[derive(Parser)]
#[command(name = "lqnt", version, about = "Logarithmic (power-of-two) tensor quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleKind {
    Em,
    Max,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActScaleKind {
    Max,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Args)]
struct QuantArgs {
    /// Bits per stored value, including the sign bit.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=8))]
    bits: u8,
    /// Scale selection strategy.
    #[arg(long, value_enum, default_value_t = ScaleKind::Em)]
    scale: ScaleKind,
    /// Scale for `--scale fixed` (default 1.0).
    #[arg(long)]
    scale_value: Option<f64>,
    /// Store bias tensors in full precision (default).
    #[arg(long, conflicts_with = "no_keep_biases")]
    keep_biases: bool,
    /// Quantize bias tensors too.
    #[arg(long)]
    no_keep_biases: bool,
    /// Substring that marks a tensor as a bias.
    #[arg(long, default_value = "bias")]
    bias_rule: String,
}

impl QuantArgs {
    fn config(&self) -> Result<QuantConfig, CliError> {
        let scale_strategy = match self.scale {
            ScaleKind::Em => ScaleStrategy::em_default(),
            ScaleKind::Max => ScaleStrategy::Max,
            ScaleKind::Fixed => {
                let value = self.scale_value.unwrap_or(1.0);
                if !(value > 0.0 && value.is_finite()) {
                    return Err(CliError::usage(format!(
                        "--scale-value must be a positive finite number, got {value}"
                    )));
                }
                ScaleStrategy::Fixed(value)
            }
        };
        if self.scale != ScaleKind::Fixed {
            if let Some(v) = self.scale_value {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(CliError::usage(format!(
                        "--scale-value must be a positive finite number, got {v}"
                    )));
                }
            }
        }
        Ok(QuantConfig {
            bits: self.bits,
            scale_strategy,
            keep_biases: !self.no_keep_biases,
            bias_rule: self.bias_rule.clone(),
            passthrough_overrides: Vec::new(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a .lqta archive into a packed .lqnm model.
    Quantize {
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decode a .lqnm model back into a full-precision .lqta archive.
    Dequantize {
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        input: PathBuf,
        output: PathBuf,
    },
    /// Per-tensor statistics, bias/weight aggregates, and manifest echo.
    Inspect {
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        /// Substring that marks a tensor as a bias (for .lqta aggregates).
        #[arg(long, default_value = "bias")]
        bias_rule: String,
        input: PathBuf,
    },
    /// Compare quantizer error across strategies on the same archive.
    Compare {
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=8))]
        bits: u8,
        /// Scale for the log+fixed arm (default 1.0).
        #[arg(long, default_value_t = 1.0)]
        scale_value: f64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        input: PathBuf,
    },
    /// Error-feedback retraining demo on a synthetic regression task.
    TrainToy {
        #[command(flatten)]
        quant: QuantArgs,
        /// Enable error feedback (default).
        #[arg(long, conflicts_with = "no_ef")]
        ef: bool,
        /// Disable error feedback.
        #[arg(long)]
        no_ef: bool,
        /// Quantize activations and use shift-add dot products.
        #[arg(long)]
        quantize_dots: bool,
        /// Activation scale mode for --quantize-dots.
        #[arg(long, value_enum, default_value_t = ActScaleKind::Max)]
        act_scale: ActScaleKind,
        /// Activation scale for `--act-scale fixed` (default 1.0).
        #[arg(long)]
        act_scale_value: Option<f64>,
        /// Skip retraining: quantize the initialized model and evaluate.
        #[arg(long)]
        no_retrain: bool,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        in_dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        /// Teacher noise standard deviation.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        /// Output .lqnm model path.
        output: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Error handling
// ---------------------------------------------------------------------------

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Degenerate { .. } => 3,
            Error::Training { .. } => 4,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn worker_threads() -> usize {
    std::env::var("LQNT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Quantize { quant, report, input, output } => {
            cmd_quantize(&quant, report, &input, &output)
        }
        Command::Dequantize { report, input, output } => cmd_dequantize(report, &input, &output),
        Command::Inspect { report, bias_rule, input } => cmd_inspect(report, &bias_rule, &input),
        Command::Compare { bits, scale_value, report, input } => {
            cmd_compare(bits, scale_value, report, &input)
        }
        Command::TrainToy {
            quant,
            ef: _,
            no_ef,
            quantize_dots,
            act_scale,
            act_scale_value,
            no_retrain,
            steps,
            lr,
            batch,
            seed,
            samples,
            in_dim,
            hidden,
            noise,
            report,
            output,
        } => {
            let act_mode = match act_scale {
                ActScaleKind::Max => {
                    if act_scale_value.is_some() {
                        return Err(CliError::usage(
                            "--act-scale-value requires --act-scale fixed",
                        ));
                    }
                    ActScaleMode::Max
                }
                ActScaleKind::Fixed => {
                    let v = act_scale_value.unwrap_or(1.0);
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(CliError::usage(format!(
                            "--act-scale-value must be a positive finite number, got {v}"
                        )));
                    }
                    ActScaleMode::Fixed(v)
                }
            };
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CliError::usage(format!("--lr must be a positive finite number, got {lr}")));
            }
            if steps == 0 || batch == 0 || samples == 0 || in_dim == 0 || hidden == 0 {
                return Err(CliError::usage("--steps, --batch, --samples, --in-dim, and --hidden must be >= 1"));
            }
            let cfg = TrainConfig {
                steps,
                lr,
                batch_size: batch,
                seed,
                quant: Some(quant.config()?),
                error_feedback: !no_ef,
                quantize_dots,
                act_scale: act_mode,
                em_steps_per_update: 5,
            };
            cmd_train_toy(cfg, no_retrain, samples, in_dim, hidden, noise, report, &output)
        }
    }
}

// ---------------------------------------------------------------------------
// quantize / dequantize
// ---------------------------------------------------------------------------

fn cmd_quantize(
    quant: &QuantArgs,
    report: ReportFormat,
    input: &Path,
    output: &Path,
) -> Result<(), CliError> {
    let config = quant.config()?;
    let archive = TensorArchive::load(input)?;
    let result = write_model_with_threads(&archive, &config, output, worker_threads())?;
    match report {
        ReportFormat::Json => println!("{}", serde_json::to_string(&result).expect("report serializes")),
        ReportFormat::Text => {
            println!("{:<32} {:>14} {:>14} {:>8}", "tensor", "original", "compressed", "ratio");
            for t in &result.per_tensor {
                println!(
                    "{:<32} {:>14} {:>14} {:>8.3}",
                    t.name,
                    t.original_bytes,
                    t.compressed_bytes,
                    t.original_bytes as f64 / t.compressed_bytes as f64
                );
            }
            println!(
                "total: {} -> {} payload bytes, payload ratio {}, file ratio {}",
                result.original_bytes, result.compressed_bytes, result.ratio, result.file_ratio
            );
        }
    }
    Ok(())
}

fn cmd_dequantize(report: ReportFormat, input: &Path, output: &Path) -> Result<(), CliError> {
    dequantize_model(input, output)?;
    match report {
        ReportFormat::Json => println!(
            "{}",
            serde_json::json!({"input": input.display().to_string(), "output": output.display().to_string()})
        ),
        ReportFormat::Text => println!("dequantized {} -> {}", input.display(), output.display()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TensorInspection {
    name: String,
    shape: Vec<usize>,
    count: usize,
    min: f64,
    max: f64,
    mean: f64,
    stddev: f64,
    is_bias: bool,
}

#[derive(Serialize)]
struct GroupAggregate {
    count: usize,
    fraction: f64,
    stddev: f64,
}

#[derive(Serialize)]
struct ArchiveInspection {
    format: &'static str,
    tensors: Vec<TensorInspection>,
    bias: GroupAggregate,
    weight: GroupAggregate,
}

#[derive(Serialize)]
struct ModelTensorInspection {
    name: String,
    shape: Vec<usize>,
    count: usize,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
    compressed_bytes: u64,
}

#[derive(Serialize)]
struct ModelInspection {
    format: &'static str,
    bits: u8,
    keep_biases: bool,
    tensors: Vec<ModelTensorInspection>,
    payload_ratio: f64,
    file_ratio: f64,
    raw_fraction: f64,
}

fn pooled_stddev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / n as f64).sqrt()
}

fn sniff_format(path: &Path) -> Result<[u8; 4], CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::from(Error::Io { path: path.to_path_buf(), source: e }))?;
    if bytes.len() < 4 {
        return Err(CliError::from(Error::Format("file too short for a magic number".into())));
    }
    Ok([bytes[0], bytes[1], bytes[2], bytes[3]])
}

fn cmd_inspect(report: ReportFormat, bias_rule: &str, input: &Path) -> Result<(), CliError> {
    match &sniff_format(input)? {
        b"LQTA" => {
            let archive = TensorArchive::load(input)?;
            let mut tensors = Vec::new();
            for t in archive.iter() {
                let s = tensor_stats(t);
                tensors.push(TensorInspection {
                    name: t.name().to_string(),
                    shape: t.shape().to_vec(),
                    count: t.len(),
                    min: s.min,
                    max: s.max,
                    mean: s.mean,
                    stddev: s.stddev,
                    is_bias: t.name().contains(bias_rule),
                });
            }
            let group = |want_bias: bool| -> GroupAggregate {
                let values: Vec<f64> = archive
                    .iter()
                    .filter(|t| t.name().contains(bias_rule) == want_bias)
                    .flat_map(|t| t.data().iter().map(|&v| v as f64))
                    .collect();
                let total: usize = archive.iter().map(|t| t.len()).sum();
                GroupAggregate {
                    count: values.len(),
                    fraction: if total == 0 { 0.0 } else { values.len() as f64 / total as f64 },
                    stddev: pooled_stddev(values.iter().copied()),
                }
            };
            let inspection = ArchiveInspection {
                format: "lqta",
                tensors,
                bias: group(true),
                weight: group(false),
            };
            match report {
                ReportFormat::Json => {
                    println!("{}", serde_json::to_string(&inspection).expect("serializes"))
                }
                ReportFormat::Text => {
                    println!(
                        "{:<32} {:>10} {:>12} {:>12} {:>12} {:>12}",
                        "tensor", "count", "min", "max", "mean", "stddev"
                    );
                    for t in &inspection.tensors {
                        println!(
                            "{:<32} {:>10} {:>12.5} {:>12.5} {:>12.5} {:>12.5}{}",
                            t.name,
                            t.count,
                            t.min,
                            t.max,
                            t.mean,
                            t.stddev,
                            if t.is_bias { "  (bias)" } else { "" }
                        );
                    }
                    println!(
                        "bias:   {} values ({:.2}%), pooled stddev {:.5}",
                        inspection.bias.count,
                        100.0 * inspection.bias.fraction,
                        inspection.bias.stddev
                    );
                    println!(
                        "weight: {} values ({:.2}%), pooled stddev {:.5}",
                        inspection.weight.count,
                        100.0 * inspection.weight.fraction,
                        inspection.weight.stddev
                    );
                }
            }
            Ok(())
        }
        b"LQNM" => {
            let container = read_model(input)?;
            let file_bytes = std::fs::metadata(input)
                .map_err(|e| CliError::from(Error::Io { path: input.to_path_buf(), source: e }))?
                .len();
            let summary = compression_report(&container, file_bytes);
            let mut tensors = Vec::new();
            for qt in container.quantized().values() {
                tensors.push(ModelTensorInspection {
                    name: qt.name().to_string(),
                    shape: qt.shape().to_vec(),
                    count: qt.len(),
                    kind: "log",
                    scale: Some(qt.scale()),
                    compressed_bytes: (qt.len() * qt.bits() as usize).div_ceil(8) as u64,
                });
            }
            for t in container.passthrough().values() {
                tensors.push(ModelTensorInspection {
                    name: t.name().to_string(),
                    shape: t.shape().to_vec(),
                    count: t.len(),
                    kind: "raw",
                    scale: None,
                    compressed_bytes: 4 * t.len() as u64,
                });
            }
            tensors.sort_by(|a, b| a.name.cmp(&b.name));
            let total: usize = tensors.iter().map(|t| t.count).sum();
            let raw: usize =
                tensors.iter().filter(|t| t.kind == "raw").map(|t| t.count).sum();
            let inspection = ModelInspection {
                format: "lqnm",
                bits: container.bits(),
                keep_biases: container.keep_biases(),
                tensors,
                payload_ratio: summary.ratio,
                file_ratio: summary.file_ratio,
                raw_fraction: if total == 0 { 0.0 } else { raw as f64 / total as f64 },
            };
            match report {
                ReportFormat::Json => {
                    println!("{}", serde_json::to_string(&inspection).expect("serializes"))
                }
                ReportFormat::Text => {
                    println!("format lqnm, {} bits, keep_biases {}", inspection.bits, inspection.keep_biases);
                    println!("{:<32} {:>6} {:>10} {:>14} {:>12}", "tensor", "kind", "count", "scale", "bytes");
                    for t in &inspection.tensors {
                        match t.scale {
                            Some(s) => println!(
                                "{:<32} {:>6} {:>10} {:>14} {:>12}",
                                t.name, t.kind, t.count, s, t.compressed_bytes
                            ),
                            None => println!(
                                "{:<32} {:>6} {:>10} {:>14} {:>12}",
                                t.name, t.kind, t.count, "-", t.compressed_bytes
                            ),
                        }
                    }
                    println!(
                        "payload ratio {}, file ratio {}, raw fraction {:.2}%",
                        inspection.payload_ratio,
                        inspection.file_ratio,
                        100.0 * inspection.raw_fraction
                    );
                }
            }
            Ok(())
        }
        other => Err(CliError::from(Error::Format(format!(
            "unrecognized magic {:?}; expected an .lqta or .lqnm file",
            other
        )))),
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StrategyRow {
    strategy: &'static str,
    total_sse: Option<f64>,
    per_tensor: BTreeMap<String, f64>,
}

fn cmd_compare(
    bits: u8,
    fixed_scale: f64,
    report: ReportFormat,
    input: &Path,
) -> Result<(), CliError> {
    if !(fixed_scale > 0.0 && fixed_scale.is_finite()) {
        return Err(CliError::usage(format!(
            "--scale-value must be a positive finite number, got {fixed_scale}"
        )));
    }
    let archive = TensorArchive::load(input)?;
    let mut rows: Vec<StrategyRow> = Vec::new();
    for strategy in ["log+em", "log+max", "log+fixed", "linear+max"] {
        let mut per_tensor = BTreeMap::new();
        let mut total = 0.0f64;
        let mut available = true;
        for t in archive.iter() {
            let sse = match strategy {
                "log+em" => {
                    let fit = em_fit_scale(t, bits, 1e-6, 50)?;
                    quantization_sse(t, &encode(t, fit.scale, bits)?)?
                }
                "log+max" => quantization_sse(t, &encode(t, max_scale(t)?, bits)?)?,
                "log+fixed" => quantization_sse(t, &encode(t, fixed_scale, bits)?)?,
                "linear+max" => {
                    if bits == 1 {
                        available = false;
                        break;
                    }
                    let lq = linear_encode(t, max_scale(t)?, bits)?;
                    lqnt_core::codec::linear_sse(t, &lq)?
                }
                _ => unreachable!(),
            };
            total += sse;
            per_tensor.insert(t.name().to_string(), sse);
        }
        rows.push(StrategyRow {
            strategy,
            total_sse: available.then_some(total),
            per_tensor: if available { per_tensor } else { BTreeMap::new() },
        });
    }
    match report {
        ReportFormat::Json => println!("{}", serde_json::to_string(&rows).expect("serializes")),
        ReportFormat::Text => {
            for row in &rows {
                match row.total_sse {
                    Some(total) => {
                        println!("{:<12} total SSE {}", row.strategy, total);
                        for (name, sse) in &row.per_tensor {
                            println!("    {name:<28} {sse}");
                        }
                    }
                    None => println!("{:<12} unavailable at B=1", row.strategy),
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_train_toy(
    cfg: TrainConfig,
    no_retrain: bool,
    samples: usize,
    in_dim: usize,
    hidden: usize,
    noise: f64,
    report: ReportFormat,
    output: &Path,
) -> Result<(), CliError> {
    let data = gen_synthetic_task(cfg.seed, samples, in_dim, noise)?;
    let model = ToyModel::init(cfg.seed, in_dim, hidden);
    let quant = cfg.quant.clone().expect("train-toy always quantizes");

    if no_retrain {
        let archive = model.to_archive()?;
        let eval = quantize_then_eval(&archive, &quant, &data)?;
        write_model_with_threads(&archive, &quant, output, worker_threads())?;
        match report {
            ReportFormat::Json => {
                println!(
                    "{}",
                    serde_json::json!({
                        "final_loss": eval.loss,
                        "param_sse": eval.param_sse,
                        "retrained": false,
                        "model": output.display().to_string(),
                    })
                );
            }
            ReportFormat::Text => {
                println!(
                    "no retraining: loss {}, parameter sse {}, model {}",
                    eval.loss,
                    eval.param_sse,
                    output.display()
                );
            }
        }
        return Ok(());
    }

    let outcome = retrain(&model, &data, &cfg)?;
    for m in &outcome.metrics {
        match report {
            ReportFormat::Json => {
                println!("{}", serde_json::to_string(m).expect("metrics serialize"));
            }
            ReportFormat::Text => println!(
                "step {} loss {} sse {} scale_iters {}",
                m.step, m.loss, m.sse, m.scale_iters
            ),
        }
    }
    let container = outcome.model.expect("quantized run exports a model");
    container.save(output)?;
    match report {
        ReportFormat::Json => {
            println!(
                "{}",
                serde_json::json!({
                    "final_loss": outcome.final_eval_loss,
                    "retrained": true,
                    "steps": cfg.steps,
                    "model": output.display().to_string(),
                })
            );
        }
        ReportFormat::Text => {
            println!(
                "final loss {} after {} steps, model {}",
                outcome.final_eval_loss,
                cfg.steps,
                output.display()
            );
        }
    }
    Ok(())
}

