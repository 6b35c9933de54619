//! `pkcal`: projected-kernel calibration from the command line.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod data;
mod report;
mod run;

use clap::{Args, Parser, Subcommand};
use pkcal_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pkcal", version, about = "Computer-model calibration by projected kernels")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// CSV data file with header x_1,...,x_d,y (fit/bayes/compare).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the report and plot tables.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a calibration estimate (--method pk|l2|ko).
    Fit {
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample the posterior and report credible regions (--variant pk|ogp).
    Bayes {
        #[arg(long, default_value = "pk")]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run pk, l2, and ko-mode on the same data and tabulate.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Replicated synthetic-data study on a shipped scenario.
    McStudy {
        #[command(flatten)]
        common: Common,
    },
    /// Prediction-error decay along a sample-size grid.
    RateStudy {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit categories: 2 config/validation, 3 data, 4 numeric, 5
/// optimization/mixing, 6 external-model transport.
fn exit_category(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Validation(_) | Error::Resource(_) => (2, "config"),
        Error::Io(_) => (3, "data"),
        Error::Numeric(_) | Error::Degenerate(_) | Error::IllConditioned(_) => (4, "numeric"),
        Error::Optimization(_) | Error::Mixing(_) | Error::Oracle(_) => (5, "optimization"),
        Error::Transport(_) | Error::Protocol(_) | Error::Process(_) => (6, "external-model"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Cmd::Fit { common, .. }
        | Cmd::Bayes { common, .. }
        | Cmd::Compare { common }
        | Cmd::McStudy { common }
        | Cmd::RateStudy { common } => common,
    };

    if let Some(threads) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let outcome = (|| -> pkcal_core::Result<()> {
        let mut config = config::load_config(&common.config)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let need_data = || -> pkcal_core::Result<&PathBuf> {
            common.data.as_ref().ok_or_else(|| {
                Error::Validation("this command requires --data <file>".into())
            })
        };
        match &cli.command {
            Cmd::Fit { method, .. } => {
                run::run_fit(&config, need_data()?, &common.out, method.as_deref())
            }
            Cmd::Bayes { variant, .. } => {
                run::run_bayes(&config, need_data()?, &common.out, variant)
            }
            Cmd::Compare { .. } => run::run_compare(&config, need_data()?, &common.out),
            Cmd::McStudy { .. } => run::run_mc_study(&config, &common.out),
            Cmd::RateStudy { .. } => run::run_rate_study(&config, &common.out),
        }
    })();

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_category(&e);
            eprintln!(
                "{}",
                serde_json::json!({
                    "error_category": category,
                    "message": e.to_string(),
                })
            );
            ExitCode::from(code)
        }
    }
}
