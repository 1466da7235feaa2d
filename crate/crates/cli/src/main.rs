//! `compat-reason`: judge outfit compatibility and say why.
//!
//! The binary wraps the library end to end: generate a labeled corpus,
//! turn pixels into color features, train a judgment model with the reason
//! regularizer, score checkpoints, render explanations, and sweep
//! hyperparameter grids into CSV reports. Every subcommand is file-driven
//! and exits 0 on success or 1 with a single `error:` line on stderr.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use compat_reason_core::reasoning::RegularizerKind;

mod commands;
mod config;
mod pixels;

use config::{CliConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "compat-reason",
    version,
    about = "Outfit compatibility judgments with factor-level reasons",
    after_help = "Settings come from --config (TOML, sections: data, model, train, sweep);\n\
                  the flags above override the matching file values. Work runs on one\n\
                  thread; COMPAT_REASON_THREADS caps parallelism and must be >= 1."
)]
struct Cli {
    /// TOML settings file; flag values override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed override: the dataset seed for gen-data and selfcheck, the
    /// training seed everywhere else.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Reason-regularizer weight override.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Reason regularizer override: ce, linear, or square.
    #[arg(long, global = true, value_name = "KIND")]
    reg: Option<RegularizerKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus as NDJSON splits.
    GenData {
        /// Directory for train.ndjson, val.ndjson, and test.ndjson.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Turn a PPM image or JSON pixel list into the color feature.
    Featurize {
        /// PPM (P3/P6) image or JSON array of [r, g, b] triples.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output JSON path; stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train a model on an NDJSON corpus and save a checkpoint.
    Train {
        /// Training records (NDJSON).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Held-out records for per-epoch validation metrics.
        #[arg(long, value_name = "FILE")]
        val: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score a checkpoint on labeled records; writes a one-row CSV.
    Eval {
        /// Trained model saved by `train`.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Labeled records (NDJSON).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// CSV path for n, judgment_acc, reason_acc.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Judge one record and print the reason, sentence, and score table.
    Explain {
        /// Trained model saved by `train`.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Records file (NDJSON); --index picks the line.
        #[arg(long, value_name = "FILE")]
        record: PathBuf,
        /// Zero-based line to explain.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Alternative sentence templates (key = template lines).
        #[arg(long, value_name = "FILE")]
        templates: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train across the configured alpha/regularizer grid; write a CSV report.
    SweepAlpha {
        /// Report CSV path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Optional flat JSON series for plotting.
        #[arg(long, value_name = "FILE")]
        plot_json: Option<PathBuf>,
    },
    /// Compare reason formulations on unregularized models; write a CSV report.
    SweepFormulations {
        /// Report CSV path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Optional flat JSON series for plotting.
        #[arg(long, value_name = "FILE")]
        plot_json: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Selfcheck {
        /// How many freshly seeded models to probe.
        #[arg(long, default_value_t = 25)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    commands::thread_cap()?;
    let overrides = Overrides { seed: cli.seed, alpha: cli.alpha, reg: cli.reg };
    let config = CliConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&config, cli.seed.unwrap_or(0), &out),
        Command::Featurize { input, out } => commands::featurize(&input, out.as_deref()),
        Command::Train { data, val, out } => {
            commands::run_train(&config, &data, val.as_deref(), &out)
        }
        Command::Eval { checkpoint, data, out } => {
            commands::run_eval(&checkpoint, &data, &out, config.sweep.eval_batch)
        }
        Command::Explain { checkpoint, record, index, templates, out } => commands::run_explain(
            &checkpoint,
            &record,
            index,
            templates.as_deref(),
            out.as_deref(),
        ),
        Command::SweepAlpha { out, plot_json } => {
            commands::run_sweep_alpha(&config, &out, plot_json.as_deref())
        }
        Command::SweepFormulations { out, plot_json } => {
            commands::run_sweep_formulations(&config, &out, plot_json.as_deref())
        }
        Command::Selfcheck { seeds } => commands::run_selfcheck(cli.seed.unwrap_or(0), seeds),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // One line on stderr no matter what the source error embeds.
        let text = format!("{err:#}").replace('\n', " ");
        eprintln!("error: {}", text.trim_end());
        std::process::exit(1);
    }
}
