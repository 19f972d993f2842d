use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtcorl_cli::{commands, config, CliError, ExperimentConfig, Profile};

#[derive(Parser, Debug)]
#[command(name = "dtcorl", version, about = "Delay-robust offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; profile defaults fill missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list; repeat for several seeds.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "full")]
    profile: Profile,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write behavior datasets and their manifests.
    Generate,
    /// Train one policy per seed and grid delay.
    Train {
        /// Continue runs from their saved epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained checkpoints over the delay grid.
    Eval,
    /// Run the theory suites; exits 3 on any violated bound.
    Verify,
    /// Compare transformer and ensemble beliefs.
    BeliefBench,
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = config::load(cli.config.as_deref(), cli.profile, std::env::vars())?;
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Generate => commands::generate(&cfg).map(|_| ()),
        Command::Train { resume } => commands::train(&cfg, *resume).map(|_| ()),
        Command::Eval => commands::eval(&cfg).map(|_| ()),
        Command::Verify => commands::verify(&cfg).map(|_| ()),
        Command::BeliefBench => commands::bench(&cfg).map(|_| ()),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
