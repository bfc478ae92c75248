use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nvmux_core::scenario::{
    scenario_bandwidth, scenario_calibrate, scenario_crosstalk, scenario_noise, scenario_sweep,
};
use nvmux_core::{parse_config, serialize_config, RunConfig, ScenarioResult, DEFAULT_CONFIG_TOML};

/// Multiplexed NV magnetometer scenarios.
#[derive(Parser)]
#[command(name = "nvmux", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep one microwave source across both resonances and fit the lineshape.
    Sweep(RunArgs),
    /// Closed-loop response to a sinusoidal coil-current modulation.
    Calibrate(RunArgs),
    /// Locked noise run: spectra and sensitivities.
    Noise(RunArgs),
    /// Closed-loop transfer function and 3 dB frequency.
    Bandwidth(RunArgs),
    /// Lock-in crosstalk matrix.
    Crosstalk(RunArgs),
    /// Print the built-in configuration with every default filled in.
    DumpConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file, or `default` for the built-in one.
    #[arg(long, value_name = "PATH|default")]
    config: String,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the simulated duration, s.
    #[arg(long)]
    duration: Option<f64>,
}

fn load(args: &RunArgs) -> nvmux_core::Result<RunConfig> {
    let text = if args.config == "default" {
        DEFAULT_CONFIG_TOML.to_string()
    } else {
        std::fs::read_to_string(&args.config)?
    };
    let mut run = parse_config(&text)?;
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(d) = args.duration {
        run.duration_s = d;
    }
    run.validate()?;
    Ok(run)
}

fn execute(args: &RunArgs, scenario: fn(&RunConfig) -> nvmux_core::Result<ScenarioResult>) -> ExitCode {
    let result = load(args).and_then(|run| {
        let result = scenario(&run)?;
        result.write(&args.out)?;
        Ok(result)
    });
    match result {
        Ok(r) => {
            for (k, v) in &r.summary {
                println!("{k} = {v}");
            }
            match r.failure {
                Some(f) => {
                    eprintln!("error: {f}");
                    ExitCode::from(1)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Sweep(a) => execute(&a, scenario_sweep),
        Command::Calibrate(a) => execute(&a, scenario_calibrate),
        Command::Noise(a) => execute(&a, scenario_noise),
        Command::Bandwidth(a) => execute(&a, scenario_bandwidth),
        Command::Crosstalk(a) => execute(&a, scenario_crosstalk),
        Command::DumpConfig => match serialize_config(&RunConfig::reference()) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
