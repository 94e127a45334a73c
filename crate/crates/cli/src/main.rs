use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latseq::model::DecodeMode;
use latseq_cli::commands::decode::DecodeArgs;
use latseq_cli::commands::{decode, diagnose, eval, sweep, train};
use latseq_cli::config::RunConfig;
use latseq_cli::CliError;

#[derive(Parser)]
#[command(name = "latseq", version, about = "Discrete-latent sequence models: train, evaluate, decode, diagnose, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat key = value, supports `include`).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the latent model (and baseline) per the configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Decode inputs with the fast pipeline; report timing and counts.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// One whitespace-tokenized source per line (defaults to generated
        /// eval data with references).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference targets, one per line, for accuracy reporting.
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Decode batch sizes to time, e.g. --batch 1 --batch 64.
        #[arg(long = "batch", default_values_t = vec![1usize])]
        batch_sizes: Vec<usize>,
        /// greedy | sample | topk
        #[arg(long, default_value = "greedy")]
        mode: String,
        /// Candidates per sentence for sample/topk and NPD.
        #[arg(long)]
        candidates: Option<usize>,
        /// Rescore sampled candidates with the autoregressive baseline.
        #[arg(long, default_value_t = false)]
        npd: bool,
        /// Number of generated eval sentences when no --input is given.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Also time the autoregressive baseline on the same set.
        #[arg(long, default_value_t = false)]
        time_baseline: bool,
    },
    /// Usage histograms and the index-collapse flag for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// 6-cell compression x bit-width grid of reconstruction perplexities.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(&common.config).map_err(CliError::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let outcome = train::run(cfg, &common.out, resume.as_deref())?;
            println!(
                "{}",
                serde_json::json!({
                    "final_step": outcome.final_step,
                    "checkpoint": outcome.checkpoint.display().to_string(),
                    "metrics": outcome.metrics_path.display().to_string(),
                })
            );
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let cfg = load_config(&common)?;
            let report = eval::run(cfg, &ckpt)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Command::Decode {
            common,
            ckpt,
            input,
            refs,
            batch_sizes,
            mode,
            candidates,
            npd,
            count,
            time_baseline,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = candidates {
                cfg.candidates = c;
            }
            let mode = match mode.as_str() {
                "greedy" => DecodeMode::Greedy,
                "sample" => DecodeMode::Sample { temperature: cfg.decode_temperature },
                "topk" => DecodeMode::TopK { k: cfg.candidates },
                other => {
                    return Err(CliError::Config(anyhow::anyhow!(
                        "unknown decode mode '{other}'"
                    )))
                }
            };
            std::fs::create_dir_all(&common.out).map_err(|e| CliError::Other(e.into()))?;
            let out_file = common.out.join("decoded.txt");
            let (text, report) = decode::run(
                cfg,
                DecodeArgs {
                    ckpt: &ckpt,
                    input: input.as_deref(),
                    refs: refs.as_deref(),
                    batch_sizes,
                    mode,
                    npd,
                    count,
                    out: Some(&out_file),
                    with_baseline_timing: time_baseline,
                },
            )?;
            for line in &text {
                println!("{line}");
            }
            let report_path = common.out.join("decode-report.json");
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report).unwrap(),
            )
            .map_err(|e| CliError::Other(e.into()))?;
            eprintln!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Command::Diagnose { common, ckpt } => {
            let cfg = load_config(&common)?;
            let report = diagnose::run(cfg, &ckpt, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common)?;
            let report = sweep::run(cfg, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
