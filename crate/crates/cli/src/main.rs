use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use giuda_cli::{
    apply_thread_override, cmd_adapt, cmd_baseline, cmd_datagen, cmd_eval, cmd_field_dump,
    cmd_pretrain, cmd_resample, cmd_spst, format_evaluation, format_run, FieldSource, RunConfig,
    DEFAULT_RESAMPLE_EPSILON, DEFAULT_RESAMPLE_POINTS,
};

#[derive(Parser)]
#[command(
    name = "giuda",
    version,
    about = "Point-cloud domain adaptation with geometry-aware implicits"
)]
struct Cli {
    /// Run configuration (key = value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    Datagen,
    /// Self-supervised implicit pretraining on both domains.
    Pretrain,
    /// Joint adaptation with source labels.
    Adapt,
    /// Source-only classifier training, for comparison.
    Baseline,
    /// Self-paced self-training rounds on an adapted checkpoint.
    Spst,
    /// Accuracy and confusion matrix of a checkpoint on a labelled dataset.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
    },
    /// Sample points near the learned surface of a cloud.
    Resample {
        checkpoint: PathBuf,
        cloud: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESAMPLE_POINTS)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_RESAMPLE_EPSILON)]
        epsilon: f64,
    },
    /// Dump a distance field on a regular grid ("aud" or a checkpoint path).
    FieldDump {
        field: String,
        cloud: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    apply_thread_override(&mut cfg, std::env::var("GIUDA_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Datagen => {
            let (s, t) = cmd_datagen(&cfg)?;
            println!(
                "wrote {} source and {} target clouds under {}",
                s.len(),
                t.len(),
                cfg.data_dir.display()
            );
        }
        Command::Pretrain => print!("{}", format_run(&cmd_pretrain(&cfg)?)),
        Command::Adapt => print!("{}", format_run(&cmd_adapt(&cfg)?)),
        Command::Baseline => print!("{}", format_run(&cmd_baseline(&cfg)?)),
        Command::Spst => print!("{}", format_run(&cmd_spst(&cfg)?)),
        Command::Eval {
            checkpoint,
            manifest,
        } => print!(
            "{}",
            format_evaluation(&cmd_eval(&cfg, &checkpoint, &manifest)?)
        ),
        Command::Resample {
            checkpoint,
            cloud,
            output,
            samples,
            epsilon,
        } => {
            let r = cmd_resample(&cfg, &checkpoint, &cloud, samples, epsilon, &output)?;
            println!("kept {} of {samples} samples", r.kept);
            println!("chamfer {:.6e}", r.chamfer);
        }
        Command::FieldDump {
            field,
            cloud,
            output,
            resolution,
        } => {
            cmd_field_dump(
                &cfg,
                &FieldSource::parse(&field),
                &cloud,
                resolution,
                &output,
            )?;
            println!("wrote {resolution}^3 values to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
