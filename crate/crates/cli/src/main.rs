//! `diva`: generate the synthetic corpus, pretrain the denoiser, tune the
//! encoder against it, and evaluate the result.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use diva_core::config::RunConfig;
use diva_core::gradsuite;
use diva_core::pipeline::{self, EvalSummary};
use diva_core::trainer::MetricRow;

#[derive(Parser, Debug)]
#[command(
    name = "diva",
    version,
    about = "Diffusion-feedback encoder tuning at desk scale"
)]
struct Cli {
    /// TOML run configuration; every omitted key takes its default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus as PPM files plus a manifest.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Phase A: train the denoiser against the frozen encoder snapshot.
    Pretrain,
    /// Phase B: tune the encoder against a frozen pretrained denoiser.
    Tune {
        #[arg(long, value_name = "PATH")]
        denoiser: PathBuf,
        /// Starting encoder; defaults to the seeded snapshot.
        #[arg(long, value_name = "PATH")]
        encoder: Option<PathBuf>,
    },
    /// Run the embedding probes on an encoder checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Pretrain once per recap strategy and compare losses.
    Ablate {
        #[arg(long, value_name = "LIST", default_value = "class,0.15,0.3,0.5,all")]
        densities: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(total: usize) -> impl FnMut(&MetricRow) {
    let every = (total / 20).max(1);
    move |row: &MetricRow| {
        if row.step.is_multiple_of(every) || row.step == total {
            eprintln!(
                "phase {} step {}/{total} loss {:.5}",
                row.phase, row.step, row.loss
            );
        }
    }
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{flag} {}: no such file", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { out } => {
            let n = pipeline::gen_data(&cfg, out)
                .with_context(|| format!("writing corpus to {}", out.display()))?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Pretrain => {
            let steps = cfg.trainer.pretrain.steps;
            let res = pipeline::pretrain(&cfg, progress(steps))?;
            let last = res.metrics.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "pretrained denoiser for {steps} steps, final loss {last:.6}; wrote {}",
                cfg.output.dir.join(pipeline::DENOISER).display()
            );
        }
        Command::Tune { denoiser, encoder } => {
            require_file(denoiser, "--denoiser")?;
            if let Some(e) = encoder {
                require_file(e, "--encoder")?;
            }
            let steps = cfg.trainer.tune.steps;
            let res = pipeline::tune(&cfg, denoiser, encoder.as_deref(), progress(steps))?;
            let last = res.metrics.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "tuned encoder for {steps} steps, final loss {last:.6}; wrote {}",
                cfg.output.dir.join(pipeline::ENCODER_TUNED).display()
            );
        }
        Command::Eval { checkpoint } => {
            require_file(checkpoint, "--checkpoint")?;
            let s = pipeline::evaluate(&cfg, checkpoint)?;
            println!("{}", EvalSummary::header());
            println!("{}", s.row());
        }
        Command::Gradcheck => {
            let entries = gradsuite::run_suite(cfg.seed)?;
            let mut failed = 0;
            let mut worst_model: f64 = 0.0;
            let mut worst_op: f64 = 0.0;
            for e in &entries {
                let status = if e.passes() { "ok" } else { "FAIL" };
                println!(
                    "{:<16} {status:<4} max rel err {:.3e} over {} entries (tol {:.0e})",
                    e.name, e.report.max_rel_error, e.report.checked, e.tolerance
                );
                if !e.passes() {
                    failed += 1;
                }
                if e.tolerance == gradsuite::MODEL_TOLERANCE {
                    worst_model = worst_model.max(e.report.max_rel_error);
                } else {
                    worst_op = worst_op.max(e.report.max_rel_error);
                }
            }
            println!("primitive ops: max relative error {worst_op:.3e}");
            println!("tiny model: max relative error {worst_model:.3e}");
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Ablate { densities } => {
            let strategies = pipeline::parse_densities(densities)
                .with_context(|| format!("parsing --densities `{densities}`"))?;
            let steps = cfg.trainer.pretrain.steps;
            let mut report = progress(steps);
            let rows = pipeline::ablate(&cfg, &strategies, |s, r| {
                if r.step == 1 {
                    eprintln!("strategy {s}");
                }
                report(r)
            })?;
            println!("{}", pipeline::ablation_header());
            for r in &rows {
                println!("{}", r.row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
