//! `ppdem`: data generation, centralized and distributed fits, conditional forecast-error
//! curves, link-failure sweeps and protocol benchmarks.
//!
//! Exit codes: 0 success, 1 IO or usage error, 2 EM did not converge, 3 protocol error,
//! 4 dimension or input error.

mod bench;
mod conditional;
mod error;
mod fit;
mod gen_data;
mod output;
mod spec;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, CliResult, EXIT_OK};
use spec::{Cut, DataSource, ExperimentSpec};

#[derive(Parser)]
#[command(
    name = "ppdem",
    version,
    about = "Privacy-preserving distributed EM for wind forecast errors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and write data.csv, manifest.json and truth.json.
    GenData(gen_data::GenDataArgs),
    /// Fit the centralized benchmark and the distributed model and compare them.
    Fit(fit::FitArgs),
    /// Per-farm conditional forecast-error curves from a fit bundle.
    Conditional(conditional::ConditionalArgs),
    /// Refit with single links cut and compare against the uncut run.
    FailureSweep(sweep::SweepArgs),
    /// Inner-product error against hash length.
    InnerProductBench(bench::InnerProductArgs),
    /// Per-round convergence of one secure summation.
    SumBench(bench::SumArgs),
}

/// Experiment settings; each flag overrides the matching field of `--spec`.
#[derive(Args, Clone, Debug, Default)]
pub struct SpecArgs {
    /// JSON experiment file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Wide CSV input (timestamp, then power and forecast per farm).
    #[arg(long, conflicts_with = "preset")]
    data: Option<PathBuf>,
    /// Farm capacities for normalizing the CSV, comma separated.
    #[arg(long, value_delimiter = ',', requires = "data")]
    capacities: Option<Vec<f64>>,
    /// Synthetic dataset preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    farms: Option<usize>,
    #[arg(long)]
    hours: Option<usize>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Topology JSON (0-based edge list or coordinates with a threshold).
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Number of mixture components J.
    #[arg(short = 'j', long)]
    components: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seed of the EM initialization.
    #[arg(long)]
    em_seed: Option<u64>,
    /// Initialization strategy: kmeans++ or random-partition.
    #[arg(long)]
    init: Option<String>,
    /// Transport: exact-oracle or full-protocol.
    #[arg(long)]
    mode: Option<String>,
    /// Hash length L of the inner-product protocol.
    #[arg(long)]
    hash_bits: Option<usize>,
    /// Paillier key size in bits.
    #[arg(long)]
    key_bits: Option<usize>,
    /// Root seed of the secure protocol.
    #[arg(long)]
    protocol_seed: Option<u64>,
    /// Link cut with 1-based nodes, e.g. `1-3` or `1-3@40`; repeatable.
    #[arg(long = "cut")]
    cuts: Vec<Cut>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SpecArgs {
    pub fn resolve(&self) -> CliResult<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(path) = &self.data {
            spec.data = DataSource::Csv {
                path: path.clone(),
                capacities: self.capacities.clone(),
            };
        }
        let wants_preset = self.preset.is_some()
            || self.farms.is_some()
            || self.hours.is_some()
            || self.data_seed.is_some();
        if wants_preset {
            if let DataSource::Csv { .. } = spec.data {
                if self.data.is_some() || self.preset.is_none() {
                    return Err(CliError::Usage(
                        "--farms, --hours and --data-seed apply to presets only".into(),
                    ));
                }
                spec.data = DataSource::default();
            }
            if let DataSource::Preset {
                name,
                farms,
                hours,
                seed,
            } = &mut spec.data
            {
                if let Some(v) = &self.preset {
                    name.clone_from(v);
                }
                if let Some(v) = self.farms {
                    *farms = v;
                }
                if let Some(v) = self.hours {
                    *hours = v;
                }
                if let Some(v) = self.data_seed {
                    *seed = v;
                }
            }
        }
        if let Some(v) = &self.topology {
            spec.topology = Some(v.clone());
        }
        if let Some(v) = self.components {
            spec.em.components = v;
        }
        if let Some(v) = self.max_iterations {
            spec.em.max_iterations = v;
        }
        if let Some(v) = self.tolerance {
            spec.em.tolerance = v;
        }
        if let Some(v) = self.em_seed {
            spec.em.seed = v;
        }
        if let Some(v) = &self.init {
            spec.em.init.clone_from(v);
        }
        if let Some(v) = &self.mode {
            spec.mode.clone_from(v);
        }
        if let Some(v) = self.hash_bits {
            spec.protocol.hash.bits = v;
        }
        if let Some(v) = self.key_bits {
            spec.protocol.sum.key_bits = v;
        }
        if let Some(v) = self.protocol_seed {
            spec.protocol.seed = v;
        }
        if !self.cuts.is_empty() {
            spec.cuts.clone_from(&self.cuts);
        }
        if let Some(v) = &self.out {
            spec.output.clone_from(v);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(args) => gen_data::run(&args),
        Command::Fit(args) => fit::run(&args),
        Command::Conditional(args) => conditional::run(&args),
        Command::FailureSweep(args) => sweep::run(&args),
        Command::InnerProductBench(args) => bench::inner_product(&args),
        Command::SumBench(args) => bench::sum(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
