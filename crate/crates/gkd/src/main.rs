use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gkd::config::{parse_phases, ExperimentConfig};
use gkd::runner::{self, RunOptions};
use gkd::{GkdError, Result};
use gkd_core::trainer::Phase;

/// Train and evaluate the generalizable distillation pipeline.
#[derive(Debug, Parser)]
#[command(name = "gkd", version)]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated phases to run, e.g. `P1,P2`. Defaults to the config's list.
    #[arg(long)]
    phases: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides GKD_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip training and evaluate the checkpoints already in the output directory.
    #[arg(long)]
    eval_only: bool,
    /// Write this many predicted masks per model and test split as PGM images.
    #[arg(long, default_value_t = 0)]
    dump_masks: usize,
}

fn build(cli: &Cli) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(dir) = std::env::var("GKD_OUT_DIR") {
        if !dir.is_empty() {
            cfg.out_dir = dir.into();
        }
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let phases: Vec<Phase> = match &cli.phases {
        Some(s) => parse_phases(s)?,
        None => cfg.phase_list()?,
    };
    cfg.validate()?;
    let opts = RunOptions {
        out_dir: cfg.out_dir.clone(),
        phases,
        eval_only: cli.eval_only,
        dump_masks: cli.dump_masks,
    };
    Ok((cfg, opts))
}

fn error_record(e: &GkdError) -> String {
    let mut rec = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let GkdError::Core(gkd_core::Error::MissingPrerequisite(p)) = e {
        rec["phase"] = serde_json::Value::from(*p);
    }
    rec.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(&cli).and_then(|(cfg, opts)| {
        let summary = runner::run(&cfg, &opts)?;
        for p in &summary.ran {
            eprintln!("{} done ({} steps)", p.tag(), summary.losses[p].len());
        }
        if !summary.reports.is_empty() {
            print!("{}", gkd::report::to_text(&summary.reports, &cfg.hash()));
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
