use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlgrf_cli::commands::{diagnostics_cmd, generate_observations_cmd, run_cmd, sample_grf_cmd, validate_cmd};
use mlgrf_cli::{exit_code, RunConfig, RunOutcome};

#[derive(Parser)]
#[command(name = "mlgrf", version, about = "Multilevel GRF sampling and MLDA inversion for Darcy flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pressure observations from a reference field.
    GenerateObservations {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSON path (default: <output_dir>/observations.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw prior field realizations on one level.
    SampleGrf {
        #[command(flatten)]
        config: ConfigArgs,
        /// Level to sample on (default: finest).
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Run the MLDA chains and write chain files and the summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute diagnostics from the chain files of a finished run.
    Diagnostics {
        run_dir: PathBuf,
    },
    /// Check the transfer, covariance and Darcy identities on small meshes.
    Validate {
        /// Use row-sum lumped mass matrices in the transfer identities.
        #[arg(long)]
        lumped_mass: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags override the values read from `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    h0: Option<f64>,
    /// Index of the finest level.
    #[arg(short = 'L', long)]
    levels: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    correlation_length: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    sigma_eta2: Option<f64>,
    /// spde or kl.
    #[arg(long)]
    coarsest_sampler: Option<String>,
    #[arg(long)]
    kl_modes: Option<usize>,
    /// One value, or one per level, comma separated.
    #[arg(long)]
    beta: Option<String>,
    /// One value, or one per coarse level, comma separated.
    #[arg(long)]
    subchain: Option<String>,
    #[arg(long)]
    n_chains: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    burnin_fraction: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Observation JSON (default: <output_dir>/observations.json).
    #[arg(long)]
    observations: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> anyhow::Result<()> {
            match value {
                Some(v) => cfg.set(key, &v),
                None => Ok(()),
            }
        };
        let text = |v: Option<f64>| v.map(|x| x.to_string());
        set("h0", text(self.h0))?;
        set("L", self.levels.map(|x| x.to_string()))?;
        set("nu", text(self.nu))?;
        set("correlation_length", text(self.correlation_length))?;
        set("sigma2", text(self.sigma2))?;
        set("sigma_eta2", text(self.sigma_eta2))?;
        set("coarsest_sampler", self.coarsest_sampler.clone())?;
        set("kl_modes", self.kl_modes.map(|x| x.to_string()))?;
        set("beta", self.beta.clone())?;
        set("subchain", self.subchain.clone())?;
        set("n_chains", self.n_chains.map(|x| x.to_string()))?;
        set("n_samples", self.n_samples.map(|x| x.to_string()))?;
        set("burnin_fraction", text(self.burnin_fraction))?;
        set("epsilon", text(self.epsilon))?;
        set("seed", self.seed.map(|x| x.to_string()))?;
        set("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string()))?;
        set("observations", self.observations.as_ref().map(|p| p.display().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateObservations { config, out } => {
            let path = generate_observations_cmd(&config.resolve()?, out)?;
            println!("wrote {}", path.display());
        }
        Command::SampleGrf { config, level, count } => {
            for path in sample_grf_cmd(&config.resolve()?, level, count)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Run { config } => {
            let cfg = config.resolve()?;
            match run_cmd(&cfg)? {
                RunOutcome::UpToDate => println!("{}: summary is up to date, nothing to do", cfg.output_dir.display()),
                RunOutcome::DryRun => print!("{}", cfg.to_text()),
                RunOutcome::Completed { failed_chains } => {
                    println!("wrote {}", cfg.output_dir.join("summary.json").display());
                    if failed_chains > 0 {
                        eprintln!("{failed_chains} of {} chains failed", cfg.n_chains);
                    }
                }
            }
        }
        Command::Diagnostics { run_dir } => {
            let summary = diagnostics_cmd(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Validate { lumped_mass, out } => {
            let report = validate_cmd(lumped_mass, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
