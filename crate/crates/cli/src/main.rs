use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapeflow_cli::config::PipelineConfig;
use shapeflow_cli::{toy, CliError, CliResult, SampleOverrides};

/// Generative shape modelling and geometric uncertainty quantification.
///
/// Environment: SHAPEFLOW_OUTPUT overrides the output root and
/// SHAPEFLOW_THREADS the worker thread count.
#[derive(Parser)]
#[command(name = "shapeflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(short, long, default_value = "shapeflow.toml")]
    config: PathBuf,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Register every target shape to the template.
    Register(Common),
    /// Train the drift network on the registration flows.
    Train(Common),
    /// Continue training from the train checkpoint.
    Finetune(Common),
    /// Generate geometries from perturbed conditions.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Radius factors, comma separated.
        #[arg(long, value_delimiter = ',')]
        alpha_r: Option<Vec<f64>>,
        #[arg(long)]
        gauss_amplitude: Option<f64>,
        /// SDE trajectories averaged per geometry.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Perturbed conditions per base condition and radius factor.
        #[arg(long)]
        n_perturbations: Option<usize>,
        #[arg(long)]
        time_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Constant diffusion coefficient.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Extend generated surfaces into volume meshes.
    Extend(Common),
    /// Compute QoIs and batch statistics.
    Analyze(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the default configuration.
    DumpConfig,
    /// Write a small synthetic project.
    MakeToy {
        dir: PathBuf,
        #[arg(long, default_value_t = 6)]
        n_shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let load = |c: &Common| PipelineConfig::load(&c.config);
    match cli.command {
        Command::Register(c) => {
            let items = shapeflow_cli::cmd_register(&load(&c)?, c.force)?;
            eprintln!("registered {} shapes", items.len());
            Ok(())
        }
        Command::Train(c) => shapeflow_cli::cmd_train(&load(&c)?, c.force),
        Command::Finetune(c) => shapeflow_cli::cmd_finetune(&load(&c)?, c.force),
        Command::Sample { common, alpha_r, gauss_amplitude, n_samples, n_perturbations, time_steps, seed, sigma } => {
            let o = SampleOverrides { alpha_r, gauss_amplitude, n_samples, n_perturbations, time_steps, seed, sigma };
            shapeflow_cli::cmd_sample(&load(&common)?, &o, common.force)
        }
        Command::Extend(c) => {
            let st = shapeflow_cli::cmd_extend(&load(&c)?, c.force)?;
            let ok = st.iter().filter(|s| s.status == "ok").count();
            eprintln!("{ok} ok, {} excluded", st.len() - ok);
            Ok(())
        }
        Command::Analyze(c) => shapeflow_cli::cmd_analyze(&load(&c)?, c.force),
        Command::Run(c) => shapeflow_cli::run_all(&load(&c)?, c.force),
        Command::DumpConfig => {
            print!("{}", PipelineConfig::default().dump());
            Ok(())
        }
        Command::MakeToy { dir, n_shapes, seed } => {
            let p = toy::make_toy(&dir, n_shapes, seed)?;
            println!("{}", p.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
