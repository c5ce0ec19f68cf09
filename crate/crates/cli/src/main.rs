use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffeo_cli::commands::{
    self, CorrespondArgs, InvertArgs, KernelApplyArgs, PhantomArgs, RegisterArgs, ShootArgs,
    WarpArgs,
};
use diffeo_cli::experiment::{self, ExperimentSettings};
use diffeo_cli::Result;

#[derive(Parser, Debug)]
#[command(name = "diffeo", version, about = "Diffeomorphic image matching and pulson shooting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match a source image to a target image.
    Register(RegisterArgs),
    /// Resample an image through a stored inverse map.
    Warp(WarpArgs),
    /// Invert a stored deformation.
    Invert(InvertArgs),
    /// Turn a stored right-invariant path into the left-invariant one.
    Correspond(CorrespondArgs),
    /// Integrate pulson dynamics.
    Shoot(ShootArgs),
    /// Apply the kernel of a configuration file to a momentum field.
    KernelApply(KernelApplyArgs),
    /// Generate the bilateral phantom.
    Phantom(PhantomArgs),
    /// Run the lesion transfer experiment.
    ExperimentLesion(ExperimentArgs),
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn experiment_lesion(args: &ExperimentArgs) -> Result<String> {
    let report = experiment::run(&ExperimentSettings::new(args.size, args.seed), Some(&args.out_dir))?;
    Ok(format!(
        "experiment-lesion: size={} strategy1_smallest={} half_best={} c1_symmetric={}",
        args.size,
        report.strategy1_smallest.label(),
        report.half_best.label(),
        report.c1_symmetric.label()
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, outcome) = match &cli.command {
        Command::Register(a) => ("register", commands::register(a)),
        Command::Warp(a) => ("warp", commands::warp(a)),
        Command::Invert(a) => ("invert", commands::invert(a)),
        Command::Correspond(a) => ("correspond", commands::correspond(a)),
        Command::Shoot(a) => ("shoot", commands::shoot(a)),
        Command::KernelApply(a) => ("kernel-apply", commands::kernel_apply(a)),
        Command::Phantom(a) => ("phantom", commands::phantom(a)),
        Command::ExperimentLesion(a) => ("experiment-lesion", experiment_lesion(a)),
    };
    match outcome {
        Ok(summary) => {
            println!("{summary} OK");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{name}: {e}");
            println!("{name}: failed error {code}");
            ExitCode::from(code as u8)
        }
    }
}
