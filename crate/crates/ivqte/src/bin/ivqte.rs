//! Thin command-line front end over the library pipelines.
//!
//! Exit codes: 0 success, 2 configuration error, 3 identification-assumption
//! failure, 4 data error.

use clap::{Args, Parser, Subcommand};
use ivqte::cli::{
    run_diagnose, run_estimate, run_oracle, run_simulate, DiagnoseArgs, EstimateArgs, OracleArgs,
    SimulateArgs,
};
use ivqte::effects::default_tau_grid;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ivqte",
    about = "Simulate multi-valued-treatment instrument designs and estimate \
             counterfactual mappings and treatment effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a design to data.csv (+ latent.csv) in the output directory.
    Simulate(SimulateCmd),
    /// Estimate counterfactual mappings and treatment effects from a dataset.
    Estimate(EstimateCmd),
    /// Run sign-treatment and assumption diagnostics.
    Diagnose(DiagnoseCmd),
    /// Cross-check the pipeline against the independent oracle engines.
    OracleCheck(OracleCmd),
}

#[derive(Args)]
struct SimulateCmd {
    /// Preset name: example_I, example_II, or mto.
    #[arg(long, conflicts_with = "dgp_config")]
    preset: Option<String>,
    /// Treatment count minus one, for parametrized presets.
    #[arg(long)]
    k: Option<usize>,
    /// Full simulator configuration as JSON (alternative to --preset).
    #[arg(long)]
    dgp_config: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    /// RNG seed; runs with equal seed and config are byte-identical.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Skip the latent companion file.
    #[arg(long)]
    no_latent: bool,
}

#[derive(Args)]
struct EstimateCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Instrument pairs as "z1:z2,z1:z2" labels; screened automatically
    /// when omitted.
    #[arg(long)]
    pairs: Option<String>,
    /// Instrument label order, comma separated; inferred when omitted.
    #[arg(long)]
    labels: Option<String>,
    /// Quantile levels, comma separated.
    #[arg(long)]
    tau_grid: Option<String>,
    #[arg(long, default_value_t = 512)]
    grid_nodes: usize,
    #[arg(long, default_value_t = 0.01)]
    trim: f64,
    /// Weak-pair guard on complier masses.
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[arg(long, conflicts_with_all = ["propensity_json", "preset"])]
    data: Option<PathBuf>,
    /// Raw propensity rows as a JSON array of arrays.
    #[arg(long, conflicts_with = "preset")]
    propensity_json: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    tau_grid: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
}

#[derive(Args)]
struct OracleCmd {
    #[arg(long, conflicts_with = "dgp_config")]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dgp_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Interior quantile nodes checked against the exhaustive search.
    #[arg(long, default_value_t = 50)]
    nodes: usize,
    #[arg(long, default_value_t = 256)]
    grid_nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    text.split(',')
        .map(|part| {
            let mut sides = part.split(':');
            match (sides.next(), sides.next(), sides.next()) {
                (Some(a), Some(b), None) => Ok((a.trim().to_string(), b.trim().to_string())),
                _ => Err(format!("bad pair '{part}', expected z1:z2")),
            }
        })
        .collect()
}

fn parse_taus(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad tau '{part}'"))
        })
        .collect()
}

fn run() -> Result<(), ivqte::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(cmd) => run_simulate(&SimulateArgs {
            preset: cmd.preset,
            k: cmd.k,
            dgp_config: cmd.dgp_config,
            n: cmd.n,
            seed: cmd.seed,
            out_dir: cmd.out,
            latent: !cmd.no_latent,
        }),
        Command::Estimate(cmd) => {
            let pairs = cmd
                .pairs
                .as_deref()
                .map(parse_pairs)
                .transpose()
                .map_err(ivqte::Error::ConfigInvalid)?;
            let labels = cmd
                .labels
                .map(|text| text.split(',').map(|s| s.trim().to_string()).collect());
            let tau_grid = cmd
                .tau_grid
                .as_deref()
                .map(parse_taus)
                .transpose()
                .map_err(ivqte::Error::ConfigInvalid)?
                .unwrap_or_else(default_tau_grid);
            run_estimate(&EstimateArgs {
                data_path: cmd.data,
                out_dir: cmd.out,
                pairs,
                labels,
                tau_grid,
                grid_nodes: cmd.grid_nodes,
                trim_fraction: cmd.trim,
                eta: cmd.eta,
            })
            .map(|_| ())
        }
        Command::Diagnose(cmd) => {
            let pairs = cmd
                .pairs
                .as_deref()
                .map(parse_pairs)
                .transpose()
                .map_err(ivqte::Error::ConfigInvalid)?;
            let tau_grid = cmd
                .tau_grid
                .as_deref()
                .map(parse_taus)
                .transpose()
                .map_err(ivqte::Error::ConfigInvalid)?
                .unwrap_or_else(default_tau_grid);
            run_diagnose(&DiagnoseArgs {
                data_path: cmd.data,
                propensity_json: cmd.propensity_json,
                preset: cmd.preset,
                k: cmd.k,
                out_dir: cmd.out,
                pairs,
                tau_grid,
                eta: cmd.eta,
            })
            .map(|_| ())
        }
        Command::OracleCheck(cmd) => run_oracle(&OracleArgs {
            preset: cmd.preset,
            k: cmd.k,
            dgp_config: cmd.dgp_config,
            out_dir: cmd.out,
            nodes: cmd.nodes,
            grid_nodes: cmd.grid_nodes,
            seed: cmd.seed,
        })
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
