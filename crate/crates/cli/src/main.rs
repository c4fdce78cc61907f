use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sigllm_cli::commands::{
    records_to_json, run_convert, run_detect, run_evaluate, run_sweep, ConvertOptions,
    DetectOutcome,
};
use sigllm_cli::config::{FileConfig, Pipeline, RunConfig};
use sigllm_cli::CliError;

/// Anomaly detection for univariate time series driven by
/// text-completion language models.
#[derive(Parser)]
#[command(name = "sigllm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a signal's serialized windows, one per line.
    Convert(ConvertArgs),
    /// Run a detection pipeline over a signal and emit a JSON record.
    Detect(DetectArgs),
    /// Score detection records against ground-truth intervals.
    Evaluate(EvaluateArgs),
    /// Run a hyperparameter grid, emitting one record per cell.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Input signal CSV (header: timestamp,value).
    signal: PathBuf,
    /// Rolling window length; the whole series when omitted.
    #[arg(long)]
    window: Option<usize>,
    /// Step between window starts; defaults to the window length.
    #[arg(long)]
    step: Option<usize>,
    /// Decimal digits retained by quantization (auto when omitted).
    #[arg(long)]
    decimals: Option<u32>,
    /// Insert a space between every digit.
    #[arg(long, conflicts_with = "no_space")]
    space: bool,
    /// Keep digits unspaced.
    #[arg(long)]
    no_space: bool,
    /// Skip the shift into the non-negative range (values must already
    /// be non-negative).
    #[arg(long)]
    no_scale: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Input signal CSV (header: timestamp,value).
    signal: PathBuf,
    /// Declarative TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// prompter, detector or mavg.
    #[arg(long)]
    pipeline: Option<String>,
    /// http, persistence, oracle or replay.
    #[arg(long)]
    backend: Option<String>,
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Use the chat-style protocol variant.
    #[arg(long)]
    chat: bool,
    /// Window length.
    #[arg(long)]
    window: Option<usize>,
    /// Step between window starts.
    #[arg(long)]
    step: Option<usize>,
    /// Forecast horizon (detector).
    #[arg(long)]
    horizon: Option<usize>,
    /// Completions sampled per window.
    #[arg(long)]
    samples: Option<usize>,
    /// Sample-vote threshold (prompter).
    #[arg(long)]
    alpha: Option<f64>,
    /// Window-vote threshold (prompter).
    #[arg(long)]
    beta: Option<f64>,
    /// mean, median, p5 or p95 (detector).
    #[arg(long)]
    statistic: Option<String>,
    /// absolute or squared (detector).
    #[arg(long)]
    error: Option<String>,
    /// Disable EWMA smoothing of the error signal.
    #[arg(long)]
    no_smooth: bool,
    /// Decimal digits retained by quantization (auto when omitted).
    #[arg(long)]
    decimals: Option<u32>,
    /// Insert a space between every digit.
    #[arg(long, conflicts_with = "no_space")]
    space: bool,
    /// Keep digits unspaced.
    #[arg(long)]
    no_space: bool,
    /// Skip the shift into the non-negative range.
    #[arg(long)]
    no_scale: bool,
    /// Seed for stub backends.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Moving-average window (mavg).
    #[arg(long)]
    ma_window: Option<usize>,
    /// Oracle stub noise standard deviation, in signal units.
    #[arg(long)]
    sigma: Option<f64>,
    /// CSV with the series the oracle stub should predict.
    #[arg(long)]
    oracle_truth: Option<PathBuf>,
    /// Transcript file for the replay backend.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Record the backend exchange to this transcript file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Dump reconstruction, error and mask columns to this CSV.
    #[arg(long)]
    debug_csv: Option<PathBuf>,
    /// Signal id used in records; defaults to the file stem.
    #[arg(long)]
    signal_id: Option<String>,
    /// Upper bound on in-flight backend requests.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Sampling temperature.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detection record JSON (single record or array).
    detections: PathBuf,
    /// Ground truth: interval array or object keyed by signal id.
    truth: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(args: &RunArgs) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let file_out = file.out.clone();
    let mut config = file.into_run_config()?;

    if let Some(p) = &args.pipeline {
        config.pipeline = Pipeline::parse(p)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(kind) = &args.backend {
        config.backend.kind = kind.clone();
    }
    if let Some(endpoint) = &args.endpoint {
        config.backend.endpoint = Some(endpoint.clone());
    }
    if let Some(model) = &args.model {
        config.backend.model = Some(model.clone());
        // naming a model implies the http backend unless stated
        if args.backend.is_none() && config.backend.kind == "persistence" {
            config.backend.kind = "http".into();
        }
    }
    if args.chat {
        config.backend.chat = true;
    }
    if let Some(parallelism) = args.parallelism {
        config.backend.parallelism = parallelism;
    }
    if let Some(sigma) = args.sigma {
        config.backend.sigma = sigma;
    }
    if let Some(path) = &args.oracle_truth {
        config.backend.oracle_truth = Some(path.clone());
    }
    if let Some(path) = &args.replay {
        config.backend.replay_path = Some(path.clone());
        if args.backend.is_none() {
            config.backend.kind = "replay".into();
        }
    }

    if let Some(window) = args.window {
        config.prompter.window_size = window;
        config.detector.window_size = window;
    }
    if let Some(step) = args.step {
        config.prompter.step_size = step;
        config.detector.step_size = step;
    }
    if let Some(samples) = args.samples {
        config.prompter.n_samples = samples;
        config.detector.n_samples = samples;
    }
    if let Some(horizon) = args.horizon {
        config.detector.horizon = horizon;
    }
    if let Some(alpha) = args.alpha {
        config.prompter.alpha = alpha;
    }
    if let Some(beta) = args.beta {
        config.prompter.beta = beta;
    }
    if let Some(statistic) = &args.statistic {
        config.detector.statistic = statistic.parse().map_err(CliError::Config)?;
    }
    if let Some(error) = &args.error {
        config.detector.error = error.parse().map_err(CliError::Config)?;
    }
    if args.no_smooth {
        config.detector.smoothing = false;
    }
    if let Some(temperature) = args.temperature {
        config.prompter.temperature = temperature;
        config.detector.temperature = temperature;
    }
    if let Some(ma_window) = args.ma_window {
        config.mavg.ma_window = ma_window;
    }

    if let Some(decimals) = args.decimals {
        config.codec.decimals = Some(decimals);
    }
    if args.space {
        config.codec.space = Some(true);
    }
    if args.no_space {
        config.codec.space = Some(false);
    }
    if args.no_scale {
        config.codec.scale = false;
    }

    let out = args.out.clone().or(file_out);
    Ok((config, out))
}

fn emit(out: Option<&PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Convert(args) => {
            let options = ConvertOptions {
                window: args.window,
                step: args.step,
                decimals: args.decimals,
                space: args.space,
                scale: !args.no_scale,
            };
            let text = run_convert(&args.signal, &options)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect(args) => {
            let (config, out) = resolve_config(&args.run)?;
            let outcome = run_detect(
                &config,
                &args.run.signal,
                args.run.signal_id.clone(),
                args.run.record.as_deref(),
                args.run.debug_csv.as_deref(),
            )?;
            emit(out.as_ref(), &outcome.record().to_json())?;
            match outcome {
                DetectOutcome::Complete(_) => Ok(ExitCode::SUCCESS),
                DetectOutcome::Partial(record) => {
                    eprintln!(
                        "backend failure: partial results flushed ({} interval(s) merged)",
                        record.intervals.len()
                    );
                    Ok(ExitCode::from(3))
                }
            }
        }
        Command::Evaluate(args) => {
            let output = run_evaluate(&args.detections, &args.truth)?;
            print!("{}", output.table);
            match &args.out {
                Some(path) => std::fs::write(path, &output.json)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
                None => print!("{}", output.json),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let (config, out) = resolve_config(&args.run)?;
            let records = run_sweep(&config, &args.run.signal, args.run.signal_id.clone())?;
            emit(out.as_ref(), &records_to_json(&records))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("{error}");
            ExitCode::from(error.exit_code())
        }
    }
}
