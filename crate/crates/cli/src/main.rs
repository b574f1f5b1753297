use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use trajguide_cli::commands::{self, Axis};
use trajguide_cli::SchemaError;

#[derive(Parser)]
#[command(name = "trajguide", version, about = "Trajectory-guided latent video sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides `outputs` in the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling seed; overrides `seed` in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Dump the latent after every sampler step.
    #[arg(long)]
    debug_latents: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one video and write frames, metadata and the loss table.
    Generate(Common),
    /// Sweep one hyperparameter and write a CSV row per configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Visualize aligned and raw features and compare their cross-frame similarity.
    Diagnose(Common),
    /// Track the subject in a dumped video and report ObjMC.
    EvalObjmc {
        #[command(flatten)]
        common: Common,
        /// A `video.bin` written by `generate`.
        #[arg(long)]
        video: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let prepared = commands::load(&c.spec, c.seed, c.debug_latents)?;
            let outcome = commands::cmd_generate(&prepared, c.out.as_deref())?;
            println!("{}", commands::describe(&outcome));
        }
        Command::Ablate { common: c, axis } => {
            let prepared = commands::load(&c.spec, c.seed, c.debug_latents)?;
            for r in commands::cmd_ablate(&prepared, axis, c.out.as_deref())? {
                let m = r.objmc.map_or("-".to_string(), |m| format!("{m:.4}"));
                println!("{:<28} {:<8} objmc {m} {}", r.run_id, r.status, r.message);
            }
        }
        Command::Diagnose(c) => {
            let prepared = commands::load(&c.spec, c.seed, c.debug_latents)?;
            for r in commands::cmd_diagnose(&prepared, c.out.as_deref())? {
                println!("{:<9} {:<22} {:.6}", r.mode, r.layer, r.mean_cosine);
            }
        }
        Command::EvalObjmc { common: c, video } => {
            let prepared = commands::load(&c.spec, c.seed, c.debug_latents)?;
            let m = commands::cmd_eval_objmc(&prepared, &video, c.out.as_deref())?;
            println!("objmc {m:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<SchemaError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
