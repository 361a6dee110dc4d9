//! avcast: audio-conditioned video forecasting at desk scale.
//!
//! Verbs: gen-data, train, sample, eval, report. Each takes a JSON
//! config plus dotted-path overrides, e.g.
//! `avcast train --config cfg.json --data data/ --train.lr 0.001`.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "avcast", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: $AVCAST_OUT_ROOT/<verb>-<stamp>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path overrides: --section.key value ...
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic benchmark dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Resume from checkpoints already in the output directory.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Sample stochastic futures from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding gen.ckpt / disc.ckpt.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render Markdown/CSV tables from an evaluation report.
    Report {
        #[command(flatten)]
        common: Common,
        /// eval_report.json produced by the eval verb.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Treat help/version as success, anything else as usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let (common, run): (&Common, Box<dyn FnOnce(&config::RunConfig, &std::path::Path) -> anyhow::Result<()>>) =
        match &cli.verb {
            Verb::GenData { common } => (common, Box::new(|cfg, out| commands::gen_data(cfg, out))),
            Verb::Train {
                common,
                data,
                resume,
            } => {
                let (data, resume) = (data.clone(), *resume);
                (
                    common,
                    Box::new(move |cfg, out| commands::train(cfg, &data, out, resume)),
                )
            }
            Verb::Sample { common, data, ckpt } => {
                let (data, ckpt) = (data.clone(), ckpt.clone());
                (
                    common,
                    Box::new(move |cfg, out| commands::sample(cfg, &ckpt, &data, out)),
                )
            }
            Verb::Eval { common, data, ckpt } => {
                let (data, ckpt) = (data.clone(), ckpt.clone());
                (
                    common,
                    Box::new(move |cfg, out| commands::eval(cfg, &ckpt, &data, out)),
                )
            }
            Verb::Report { common, report } => {
                let report = report.clone();
                (
                    common,
                    Box::new(move |cfg, out| commands::report(cfg, &report, out)),
                )
            }
        };

    let cfg = match config::parse_config(&common.config, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let verb_name = match &cli.verb {
        Verb::GenData { .. } => "gen-data",
        Verb::Train { .. } => "train",
        Verb::Sample { .. } => "sample",
        Verb::Eval { .. } => "eval",
        Verb::Report { .. } => "report",
    };
    let out = commands::resolve_out(common.out.clone(), &cfg, verb_name);
    if let Err(e) = run(&cfg, &out) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
