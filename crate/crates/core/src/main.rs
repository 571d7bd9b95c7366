use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nonlocal_stackelberg::runner::{
    emit_config, parse_config, parse_eps_list, run_scenario, ExperimentKind, RunStatus, ScenarioConfig,
    DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV,
};
use nonlocal_stackelberg::Error;

const DEFAULTS: &str = "\
Scenario files are TOML: top-level `kind`, `seed`, `output`, then the sections
[grid], [regions], [parameters], [kernel], [nonlinearity] and [data].
Unknown keys are rejected.

Defaults:
  seed = 0, output = <kind>
  grid:        length = 1, horizon = 1
  parameters:  mu = 1e2, epsilon = 1e-4, eps_list = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
               s = 2, lambda = 1, gamma = 1, tol = 1e-8, max_iter = 5000,
               picard_max_iter = 200, outer_tol = 1e-8, max_outer = 50,
               samples = 50, modes = 8
  regions:     omega_prime = middle half of omega
  kernel:      type = \"zero\"
  nonlinearity: name = \"zero\", placement by follower (reaction or kernel)
  data:        initial = target = trajectory = leader = { kind = \"zero\" }

Random terminal data use ChaCha8 seeded with `seed`.

Exit codes: 0 success, 1 configuration error, 2 non-convergence.";

#[derive(Parser)]
#[command(name = "stackelberg", version, about = "Stackelberg null control of nonlocal parabolic equations", after_help = DEFAULTS)]
struct Cli {
    /// Directory receiving scenario outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a scenario file.
    Run { config: PathBuf },
    /// Validate a scenario file and print its canonical form.
    Check { config: PathBuf },
    /// Leader epsilon sweep.
    Sweep {
        config: PathBuf,
        /// Decades `a..b` or a comma-separated list.
        #[arg(long, default_value = "1e-1..1e-5")]
        eps: String,
    },
    /// Empirical observability ratios over random terminal data.
    ProbeObservability {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
}

fn load(path: &Path) -> Result<ScenarioConfig, Error> {
    parse_config(path)
}

fn execute(cli: Cli) -> Result<i32, Error> {
    let cfg = match cli.command {
        Command::Check { config } => {
            let cfg = load(&config)?;
            print!("{}", emit_config(&cfg)?);
            eprintln!("{}: ok", config.display());
            return Ok(0);
        }
        Command::Run { config } => load(&config)?,
        Command::Sweep { config, eps } => {
            let mut cfg = load(&config)?;
            cfg.kind = ExperimentKind::LeaderSweep;
            cfg.parameters.eps_list = Some(parse_eps_list(&eps)?);
            cfg
        }
        Command::ProbeObservability { config, samples } => {
            let mut cfg = load(&config)?;
            cfg.kind = ExperimentKind::Probe;
            cfg.parameters.samples = samples;
            cfg
        }
    };
    let out = run_scenario(&cfg, &cli.output_root)?;
    for line in &out.report {
        println!("{line}");
    }
    if let RunStatus::NonConvergence(msg) = &out.status {
        eprintln!("non-convergence: {msg}");
    }
    eprintln!("outputs written to {}", out.out_dir.display());
    Ok(out.exit_code())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
