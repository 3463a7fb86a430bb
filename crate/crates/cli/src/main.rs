//! `seaice`: command-line harness for the forecasting pipeline.
//!
//! Exit codes: 0 success (including runs where some models were skipped),
//! 1 configuration error, 2 data error, 3 training failure.

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use seaice_core::bench::{self, BenchConfig, ModelStatus};
use seaice_core::latent::CompressorKind;
use seaice_core::Error;

#[derive(Parser)]
#[command(
    name = "seaice",
    version,
    about = "Latent-space S2S sea-ice forecasting harness"
)]
struct Cli {
    /// JSON configuration file; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set eval.init_stride=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic archive.
    Synth,
    /// Fit the EOF compressor on the training split.
    FitEof,
    /// Train the convolutional autoencoder on the training split.
    TrainAe,
    /// Encode every archive day with the stored compressor.
    Encode,
    /// Train the configured backbones.
    Train {
        /// Only this backbone.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Roll one model out from one init date.
    Rollout {
        #[arg(long)]
        model: String,
        #[arg(long)]
        init: NaiveDate,
    },
    /// Daily forecasts over the test period in lead blocks.
    EvalS2s,
    /// September-mean forecasts at fixed leads, detrended by year.
    EvalSio,
    /// September-minimum case study.
    Extremes,
    /// Rank backbones on validation rollouts and fit ensemble weights.
    Ensemble,
    /// Train 7- and 15-day rolling windows and write both ACC curves.
    Windows,
    /// Markdown summary and plot data from evaluation outputs.
    Report {
        /// Output directory; the configured one by default.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Every step from synthetic data to the summary.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::Diverged { .. } | Error::MissingGrad(_) | Error::NonScalarLoss(_) => 3,
        _ => 2,
    }
}

fn print_status(what: &str, status: &[ModelStatus]) {
    for s in status {
        if s.reason.is_empty() {
            println!("{what} {}: {}", s.model, s.status);
        } else {
            println!("{what} {}: {} ({})", s.model, s.status, s.reason);
        }
    }
}

fn run(cli: Cli) -> seaice_core::Result<()> {
    let cfg = BenchConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Synth => println!("archive {}", bench::cmd_synth(&cfg)?.display()),
        Cmd::FitEof => println!(
            "compressor {}",
            bench::cmd_fit_compressor(&cfg, CompressorKind::Eof)?
        ),
        Cmd::TrainAe => println!(
            "compressor {}",
            bench::cmd_fit_compressor(&cfg, CompressorKind::Autoencoder)?
        ),
        Cmd::Encode => println!("encoded {} days", bench::cmd_encode(&cfg)?),
        Cmd::Train { backbone } => {
            for id in bench::cmd_train(&cfg, backbone.as_deref())? {
                println!("trained {id}");
            }
        }
        Cmd::Rollout { model, init } => {
            println!("run {}", bench::cmd_rollout(&cfg, &model, init)?.display())
        }
        Cmd::EvalS2s => print_status("s2s", &bench::cmd_eval_s2s(&cfg)?),
        Cmd::EvalSio => print_status("september", &bench::cmd_eval_sio(&cfg)?),
        Cmd::Extremes => {
            for r in bench::cmd_extremes(&cfg)? {
                println!(
                    "{}: minimum {:.4} on {} (observed {:.4} on {})",
                    r.model, r.pred_min_sie, r.pred_min_date, r.obs_min_sie, r.obs_min_date
                );
            }
        }
        Cmd::Ensemble => print_status("ensemble", &bench::cmd_ensemble(&cfg)?),
        Cmd::Windows => {
            let steadier = bench::cmd_windows(&cfg)?;
            println!("15-day window month-to-month ACC variance no larger than 7-day: {steadier}");
        }
        Cmd::Report { dir } => report(&dir.unwrap_or(cfg.output))?,
        Cmd::Pipeline => {
            bench::run_pipeline(&cfg)?;
            report(&cfg.output)?;
        }
    }
    Ok(())
}

fn report(dir: &std::path::Path) -> seaice_core::Result<()> {
    let s = bench::cmd_report(dir)?;
    for (m, acc) in &s.models {
        match acc {
            Some(a) => println!("{m}: longest-block ACC {a}"),
            None => println!("{m}: {}", bench::SKIPPED),
        }
    }
    println!(
        "summary {}",
        dir.join("report").join("summary.md").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(w) = std::env::var("SEAICE_WORKERS") {
        let pool = w
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("SEAICE_WORKERS must be a positive integer, got '{w}'"))
            .and_then(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| e.to_string())
            });
        if let Err(e) = pool {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
