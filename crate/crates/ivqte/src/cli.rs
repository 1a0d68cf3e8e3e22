//! Command pipelines behind the `ivqte` binary: simulate a design to CSV,
//! estimate effects from a dataset, run assumption diagnostics, and
//! cross-check the pipeline against the oracle engines.
//!
//! Every run writes a `manifest.json` with the seed and a hash of the
//! resolved configuration; identical manifests imply identical outputs.

use crate::cdf::{grid, trim_support};
use crate::compliers::{Cells, PropensityMatrix, DEFAULT_ETA};
use crate::counterfactual::{build_all_maps, build_maps_on_grid, MapFamily, SystemTables};
use crate::dgp::{self, Dataset, DgpConfig, LatentRecord, Obs, PresetDesign};
use crate::diagnostics::{
    check_assumption3, detect_sign_treatments, determinant_sweep, pooled_cell_quantiles,
    propensity_det_exact, Assumption3, JacobianInput, KernelCells, PairSignReport,
    SignDetection, SweepEntry, SweepOptions,
};
use crate::effects::{compute_report, default_tau_grid, EffectReport};
use crate::error::{Error, Result};
use crate::monotonicity::{Direction, MonotonicitySpec, PairMonotonicity};
use crate::oracle::{analytic_phi, grid_solve, GridSolveOptions, LatentComplierStats};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Refinement factor of the internal solver grid over the reporting grid.
const SOLVER_OVERSAMPLE: usize = 4;

// ---------------------------------------------------------------------------
// Dataset file formats
// ---------------------------------------------------------------------------

/// Write observed records as `y,t,z` with instrument labels in `z`.
pub fn write_data_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["y", "t", "z"])?;
    for obs in &data.records {
        writer.write_record(&[
            obs.y.to_string(),
            obs.t.to_string(),
            data.instrument_labels[obs.z].clone(),
        ])?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// Write the latent companion file: per-arm ranks and potential outcomes,
/// the potential treatment under every instrument value, and the realized
/// assignment.
pub fn write_latent_csv(data: &Dataset, path: &Path) -> Result<()> {
    let latent = data.latent_records()?;
    let k = data.k;
    let m = data.n_instruments();
    let mut header: Vec<String> = (0..=k).map(|t| format!("u_{t}")).collect();
    header.extend((0..=k).map(|t| format!("y_{t}")));
    header.extend((0..m).map(|z| format!("t_at_z{z}")));
    header.push("z".into());
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(&header)?;
    for rec in latent {
        let mut row: Vec<String> = rec.rank_variables.iter().map(f64::to_string).collect();
        row.extend(rec.potential_outcomes.iter().map(f64::to_string));
        row.extend(rec.potential_treatments.iter().map(usize::to_string));
        row.push(data.instrument_labels[rec.z].clone());
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// Read a `y,t,z` dataset. Instrument labels default to the sorted unique
/// values found in the file (numeric sort when all labels parse as
/// integers); an explicit label list pins the index order.
pub fn read_data_csv(path: &Path, labels: Option<Vec<String>>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column '{name}' in {}", path.display())))
    };
    let (y_col, t_col, z_col) = (col("y")?, col("t")?, col("z")?);

    let mut raw: Vec<(f64, usize, String)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let y: f64 = record[y_col]
            .parse()
            .map_err(|_| Error::Csv(format!("bad y value '{}'", &record[y_col])))?;
        let t: usize = record[t_col]
            .parse()
            .map_err(|_| Error::Csv(format!("bad t value '{}'", &record[t_col])))?;
        raw.push((y, t, record[z_col].to_string()));
    }
    if raw.is_empty() {
        return Err(Error::EmptySample);
    }

    let labels = match labels {
        Some(labels) => labels,
        None => {
            let mut seen: Vec<String> = raw.iter().map(|(_, _, z)| z.clone()).collect();
            seen.sort();
            seen.dedup();
            if seen.iter().all(|l| l.parse::<u64>().is_ok()) {
                seen.sort_by_key(|l| l.parse::<u64>().unwrap());
            }
            seen
        }
    };
    let k = raw.iter().map(|&(_, t, _)| t).max().unwrap();
    let mut records = Vec::with_capacity(raw.len());
    for (y, t, z_label) in raw {
        let z = labels
            .iter()
            .position(|l| *l == z_label)
            .ok_or_else(|| Error::Csv(format!("instrument label '{z_label}' not declared")))?;
        records.push(Obs { y, t, z });
    }
    Ok(Dataset {
        k,
        instrument_labels: labels,
        records,
        latent: None,
    })
}

/// Read the latent companion file back into records.
pub fn read_latent_csv(path: &Path, data: &mut Dataset) -> Result<()> {
    let mut reader = csv::Reader::from_path(path)?;
    let k = data.k;
    let m = data.n_instruments();
    let mut latent = Vec::new();
    for record in reader.records() {
        let record = record?;
        let expected = 2 * (k + 1) + m + 1;
        if record.len() != expected {
            return Err(Error::Csv(format!(
                "latent row has {} fields, expected {expected}",
                record.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Csv(format!("bad latent value '{s}'")))
        };
        let rank_variables: Vec<f64> =
            (0..=k).map(|i| parse(&record[i])).collect::<Result<_>>()?;
        let potential_outcomes: Vec<f64> = (0..=k)
            .map(|i| parse(&record[k + 1 + i]))
            .collect::<Result<_>>()?;
        let potential_treatments: Vec<usize> = (0..m)
            .map(|i| {
                record[2 * (k + 1) + i]
                    .parse()
                    .map_err(|_| Error::Csv("bad potential treatment".into()))
            })
            .collect::<std::result::Result<_, _>>()?;
        let z_label = &record[expected - 1];
        let z = data
            .instrument_labels
            .iter()
            .position(|l| l == z_label)
            .ok_or_else(|| Error::Csv(format!("instrument label '{z_label}' not declared")))?;
        latent.push(LatentRecord {
            rank_variables,
            potential_outcomes,
            potential_treatments,
            z,
        });
    }
    data.latent = Some(latent);
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    seed: Option<u64>,
    n: Option<usize>,
    config_hash: String,
    outputs: Vec<String>,
}

fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("serializable config");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest<T: Serialize>(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    n: Option<usize>,
    config: &T,
    outputs: &[&str],
) -> Result<()> {
    let manifest = Manifest {
        schema_version: REPORT_SCHEMA_VERSION,
        command,
        seed,
        n,
        config_hash: config_hash(config),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| Error::Io(e.to_string()))?;
    file.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub preset: Option<String>,
    pub k: Option<usize>,
    pub dgp_config: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub latent: bool,
}

/// Resolve the design from a preset name or a config file.
pub fn resolve_design(
    preset: Option<&str>,
    k: Option<usize>,
    dgp_config: Option<&Path>,
    seed: u64,
) -> Result<PresetDesign> {
    match (preset, dgp_config) {
        (Some(name), None) => dgp::preset(name, k, seed),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            let mut config: DgpConfig = serde_json::from_str(&text)
                .map_err(|e| Error::ConfigInvalid(format!("bad DGP config: {e}")))?;
            config.seed = seed;
            config.validate()?;
            // Derive the pair structure from the analytic propensities.
            let rows = dgp::analytic_propensity(&config);
            let p = PropensityMatrix::from_rows(rows, 1e-9)?;
            let spec = detect_spec(&p, &all_pairs(config.n_instruments()), config.k, 0.0)?;
            Ok(PresetDesign {
                config,
                monotonicity: spec,
            })
        }
        _ => Err(Error::ConfigInvalid(
            "provide exactly one of --preset or --dgp-config".into(),
        )),
    }
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let design = resolve_design(
        args.preset.as_deref(),
        args.k,
        args.dgp_config.as_deref(),
        args.seed,
    )?;
    design
        .config
        .validate_relevance(&design.monotonicity, 0.01)?;
    let data = dgp::simulate(&design.config, args.n)?;
    fs::create_dir_all(&args.out_dir)?;
    write_data_csv(&data, &args.out_dir.join("data.csv"))?;
    let mut outputs = vec!["data.csv"];
    if args.latent {
        write_latent_csv(&data, &args.out_dir.join("latent.csv"))?;
        outputs.push("latent.csv");
    }
    outputs.push("manifest.json");
    write_manifest(
        &args.out_dir,
        "simulate",
        Some(args.seed),
        Some(args.n),
        &design.config,
        &outputs,
    )
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EstimateArgs {
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
    /// Ordered label pairs forming the candidate monotonicity subset; when
    /// absent every unordered pair is screened.
    pub pairs: Option<Vec<(String, String)>>,
    pub labels: Option<Vec<String>>,
    pub tau_grid: Vec<f64>,
    pub grid_nodes: usize,
    pub trim_fraction: f64,
    pub eta: f64,
}

impl Default for EstimateArgs {
    fn default() -> Self {
        EstimateArgs {
            data_path: PathBuf::new(),
            out_dir: PathBuf::new(),
            pairs: None,
            labels: None,
            tau_grid: default_tau_grid(),
            grid_nodes: grid::DEFAULT_NODES,
            trim_fraction: 0.01,
            eta: DEFAULT_ETA,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub n: usize,
    pub k: usize,
    pub instrument_labels: Vec<String>,
    pub support_window: crate::cdf::SupportWindow,
    pub grid_nodes: usize,
    pub propensity: Vec<Vec<f64>>,
    pub sign_reports: Vec<PairSignReport>,
    pub assumption3: Assumption3,
    pub lambda_star: Vec<LambdaEntry>,
    pub complier_tables: Vec<ComplierSummary>,
    pub effects: Option<EffectReport>,
    pub moment_residual_max: Option<f64>,
    pub moment_residuals: Vec<MomentEntry>,
    pub determinant_sweep: Vec<SweepEntry>,
    pub warnings: Warnings,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaEntry {
    pub pair: (String, String),
    pub sign_treatment: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplierSummary {
    pub pair: (String, String),
    pub treatment: usize,
    pub probability: f64,
    pub median: Option<f64>,
    pub max_flat_width: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentEntry {
    pub tau: f64,
    pub max_abs_residual: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Warnings {
    pub saturated_nodes: usize,
    pub flat_nodes: usize,
    pub clipped_evaluations: usize,
    pub repaired_decreases: usize,
    pub max_flat_width: f64,
    pub clamped_evaluations: usize,
    pub qte_outside_window: usize,
}

/// Noise-scaled sign-detection threshold: the base weak-pair guard at a
/// reference cell size of 10 000, growing as cells shrink.
fn detection_eta(eta: f64, cells: &Cells, pair: (usize, usize)) -> f64 {
    let n_a = cells.z_count(pair.0).max(1) as f64;
    let n_b = cells.z_count(pair.1).max(1) as f64;
    let harmonic = 2.0 / (1.0 / n_a + 1.0 / n_b);
    eta * (10_000.0 / harmonic).sqrt()
}

fn all_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..m {
        for b in 0..a {
            out.push((a, b));
        }
    }
    out
}

/// Sign detection plus selection, materialized as a monotonicity spec with
/// directions read off the propensity differences.
fn detect_spec(
    p: &PropensityMatrix,
    pairs: &[(usize, usize)],
    k: usize,
    eta: f64,
) -> Result<MonotonicitySpec> {
    let reports = detect_sign_treatments(p, pairs, eta);
    match check_assumption3(&reports, k) {
        Assumption3::Satisfied { lambda_star } => {
            let pair_specs: Vec<PairMonotonicity> = lambda_star
                .iter()
                .map(|&idx| spec_pair_from_report(&reports[idx], k))
                .collect();
            MonotonicitySpec::new(k, pair_specs, (0..k).collect())
        }
        Assumption3::Violated { reason } => Err(Error::AssumptionViolated(reason)),
    }
}

fn spec_pair_from_report(report: &PairSignReport, k: usize) -> PairMonotonicity {
    let sign = match report.result {
        SignDetection::Treatment(t) => t,
        _ => unreachable!("selected pairs have a sign"),
    };
    let sign_up = report.differences[sign] > 0.0;
    let directions = (0..=k)
        .map(|t| {
            Some(if (t == sign) == sign_up {
                Direction::Geq
            } else {
                Direction::Leq
            })
        })
        .collect();
    PairMonotonicity {
        pair: report.pair,
        directions,
        sign_treatment: Some(sign),
    }
}

pub fn run_estimate(args: &EstimateArgs) -> Result<EstimateReport> {
    fs::create_dir_all(&args.out_dir)?;
    let data = read_data_csv(&args.data_path, args.labels.clone())?;
    let report = estimate_pipeline(&data, args)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    let mut outputs = vec!["report.json", "manifest.json"];
    if report.assumption3.is_satisfied() {
        outputs.insert(1, "phi_maps.csv");
        outputs.insert(2, "qte_curves.csv");
    }
    write_manifest(
        &args.out_dir,
        "estimate",
        None,
        Some(data.n()),
        args,
        &outputs,
    )?;
    if let Assumption3::Violated { reason } = &report.assumption3 {
        return Err(Error::AssumptionViolated(reason.clone()));
    }
    Ok(report)
}

/// The full estimation pipeline on an in-memory dataset. On an
/// assumption-3 violation the returned report carries the diagnostics and
/// no effects; the caller decides whether that is an error.
pub fn estimate_pipeline(data: &Dataset, args: &EstimateArgs) -> Result<EstimateReport> {
    let cells = Cells::from_dataset(data)?;
    let p = cells.propensity_matrix()?;
    let k = cells.k();

    let pair_indices: Vec<(usize, usize)> = match &args.pairs {
        Some(pairs) => pairs
            .iter()
            .map(|(a, b)| {
                let find = |l: &str| {
                    data.instrument_labels
                        .iter()
                        .position(|x| x == l)
                        .ok_or_else(|| {
                            Error::ConfigInvalid(format!("unknown instrument label '{l}'"))
                        })
                };
                Ok((find(a)?, find(b)?))
            })
            .collect::<Result<_>>()?,
        None => all_pairs(cells.n_instruments()),
    };

    let det_etas: Vec<f64> = pair_indices
        .iter()
        .map(|&pair| detection_eta(args.eta, &cells, pair))
        .collect();
    // Detect with the per-pair noise-scaled threshold: run detection per
    // pair so each uses its own threshold.
    let sign_reports: Vec<PairSignReport> = pair_indices
        .iter()
        .zip(&det_etas)
        .map(|(&pair, &eta)| detect_sign_treatments(&p, &[pair], eta).remove(0))
        .collect();
    let assumption3 = check_assumption3(&sign_reports, k);

    let label = |z: usize| data.instrument_labels[z].clone();
    let mut report = EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n: data.n(),
        k,
        instrument_labels: data.instrument_labels.clone(),
        support_window: trim_support(&data.outcomes(), args.trim_fraction)?,
        grid_nodes: args.grid_nodes,
        propensity: p.rows().to_vec(),
        sign_reports: sign_reports.clone(),
        assumption3,
        lambda_star: Vec::new(),
        complier_tables: Vec::new(),
        effects: None,
        moment_residual_max: None,
        moment_residuals: Vec::new(),
        determinant_sweep: Vec::new(),
        warnings: Warnings::default(),
    };

    let lambda_star = match &report.assumption3 {
        Assumption3::Satisfied { lambda_star } => lambda_star.clone(),
        Assumption3::Violated { .. } => {
            // Diagnostics-only report: still sweep the determinant.
            report.determinant_sweep = kernel_sweep(&cells, &p, &args.tau_grid)?;
            return Ok(report);
        }
    };

    let spec = {
        let pair_specs: Vec<PairMonotonicity> = lambda_star
            .iter()
            .map(|&idx| spec_pair_from_report(&sign_reports[idx], k))
            .collect();
        MonotonicitySpec::new(k, pair_specs, (0..k).collect())?
    };
    report.lambda_star = spec
        .selected()
        .iter()
        .map(|pm| LambdaEntry {
            pair: (label(pm.pair.0), label(pm.pair.1)),
            sign_treatment: pm.sign_treatment.unwrap(),
        })
        .collect();

    // Tables sit on an oversampled grid so nested inf-convention roundings
    // stay below one reporting step; maps are reported on the coarser grid.
    let eval_grid = grid::uniform(&report.support_window, args.grid_nodes);
    let solver_grid = grid::uniform(
        &report.support_window,
        (args.grid_nodes - 1) * SOLVER_OVERSAMPLE + 1,
    );
    let tables = SystemTables::from_data(&cells, &p, &spec, &solver_grid, args.eta)?;
    for i in 1..=k {
        let eq = tables.equation(i);
        for table in std::iter::once(&eq.sign).chain(eq.off_tables().iter().map(|(_, t)| t)) {
            report.complier_tables.push(ComplierSummary {
                pair: (label(table.pair.0), label(table.pair.1)),
                treatment: table.treatment,
                probability: table.probability,
                median: table.cdf.quantile(0.5).ok(),
                max_flat_width: table.cdf.max_flat_width(),
            });
        }
    }

    let maps = build_maps_on_grid(&tables, &eval_grid)?;
    report.warnings.saturated_nodes = maps.flags.saturated_nodes;
    report.warnings.flat_nodes = maps.flags.flat_nodes;
    report.warnings.clipped_evaluations = maps.flags.clipped_evaluations;
    report.warnings.repaired_decreases = maps.flags.repaired_decreases;
    report.warnings.max_flat_width = maps.flags.max_flat_width;

    let effects = compute_report(&tables, &maps, &cells, &p, &args.tau_grid)?;
    report.warnings.clamped_evaluations = effects.clamped_evaluations;
    report.warnings.qte_outside_window =
        effects.qte.iter().filter(|q| q.value.is_none()).count();

    // Moment residuals at the estimated potential quantile vectors.
    let weights: Vec<f64> = (0..cells.n_instruments())
        .map(|z| cells.z_count(z) as f64)
        .collect();
    let mut potential_cdfs = Vec::with_capacity(k + 1);
    for s in 0..=k {
        potential_cdfs
            .push(crate::effects::potential_cdf_pooled(s, &maps, &cells, &p, &weights, &eval_grid)?.0);
    }
    let mut worst = 0.0f64;
    for &tau in &args.tau_grid {
        let y_vector: std::result::Result<Vec<f64>, Error> = potential_cdfs
            .iter()
            .map(|cdf| cdf.quantile(tau))
            .collect();
        let Ok(y_vector) = y_vector else { continue };
        let residual = crate::diagnostics::moment_residual(&y_vector, tau, &cells, &p)?;
        let max_abs = residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        worst = worst.max(max_abs);
        report.moment_residuals.push(MomentEntry {
            tau,
            max_abs_residual: max_abs,
        });
    }
    report.moment_residual_max = Some(worst);
    report.determinant_sweep = kernel_sweep(&cells, &p, &args.tau_grid)?;
    report.effects = Some(effects);

    write_phi_maps_csv(&maps, &args.out_dir.join("phi_maps.csv")).ok();
    if let Some(effects) = &report.effects {
        write_qte_csv(effects, &args.out_dir.join("qte_curves.csv")).ok();
    }
    Ok(report)
}

fn kernel_sweep(
    cells: &Cells,
    p: &PropensityMatrix,
    taus: &[f64],
) -> Result<Vec<SweepEntry>> {
    if p.n_instruments() != p.n_treatments() {
        return Ok(Vec::new());
    }
    let kernels = KernelCells::new(cells);
    let input = JacobianInput {
        densities: &kernels,
        propensities: p,
    };
    let quantiles = pooled_cell_quantiles(cells)?;
    determinant_sweep(&input, &quantiles, taus, SweepOptions::default())
}

fn write_phi_maps_csv(maps: &MapFamily, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["s", "t", "y", "phi"])?;
    for s in 0..=maps.k {
        for t in 0..=maps.k {
            let map = maps.get(s, t);
            for (&y, &img) in map.grid().iter().zip(map.images()) {
                writer.write_record(&[
                    s.to_string(),
                    t.to_string(),
                    y.to_string(),
                    img.to_string(),
                ])?;
            }
        }
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

fn write_qte_csv(effects: &EffectReport, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["kind", "s", "t_prime", "tau", "value"])?;
    for entry in &effects.qte {
        writer.write_record(&[
            "qte".to_string(),
            entry.s.to_string(),
            entry.t_prime.to_string(),
            entry.tau.to_string(),
            entry.value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    for entry in &effects.lqte {
        writer.write_record(&[
            "lqte".to_string(),
            entry.t.to_string(),
            entry.t_prime.to_string(),
            entry.tau.to_string(),
            entry.value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseArgs {
    pub data_path: Option<PathBuf>,
    /// Raw propensity rows as JSON (`[[...], ...]`), for analytic checks.
    pub propensity_json: Option<PathBuf>,
    pub preset: Option<String>,
    pub k: Option<usize>,
    pub out_dir: PathBuf,
    pub pairs: Option<Vec<(String, String)>>,
    pub tau_grid: Vec<f64>,
    pub eta: f64,
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub k: usize,
    pub propensity: Vec<Vec<f64>>,
    pub sign_reports: Vec<PairSignReport>,
    pub assumption3: Assumption3,
    /// Exact propensity determinant as a fraction, when square.
    pub propensity_determinant: Option<String>,
    pub propensity_determinant_f64: Option<f64>,
    pub determinant_sweep: Vec<SweepEntry>,
    pub moment_residuals: Vec<MomentEntry>,
}

pub fn run_diagnose(args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    fs::create_dir_all(&args.out_dir)?;
    let report = match (&args.data_path, &args.propensity_json, &args.preset) {
        (Some(path), None, None) => diagnose_data(path, args),
        (None, Some(path), None) => diagnose_matrix(path, args),
        (None, None, Some(name)) => diagnose_preset(name, args),
        _ => Err(Error::ConfigInvalid(
            "provide exactly one of --data, --propensity-json, --preset".into(),
        )),
    }?;
    write_json(&args.out_dir.join("diagnose.json"), &report)?;
    write_manifest(
        &args.out_dir,
        "diagnose",
        None,
        None,
        args,
        &["diagnose.json", "manifest.json"],
    )?;
    Ok(report)
}

fn label_pairs_to_indices(
    pairs: &Option<Vec<(String, String)>>,
    labels: &[String],
    fallback: Vec<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    match pairs {
        None => Ok(fallback),
        Some(pairs) => pairs
            .iter()
            .map(|(a, b)| {
                let find = |l: &str| {
                    labels.iter().position(|x| x == l).ok_or_else(|| {
                        Error::ConfigInvalid(format!("unknown instrument label '{l}'"))
                    })
                };
                Ok((find(a)?, find(b)?))
            })
            .collect(),
    }
}

fn diagnose_data(path: &Path, args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    let data = read_data_csv(path, None)?;
    let cells = Cells::from_dataset(&data)?;
    let p = cells.propensity_matrix()?;
    let k = cells.k();
    let pair_indices = label_pairs_to_indices(
        &args.pairs,
        &data.instrument_labels,
        all_pairs(cells.n_instruments()),
    )?;
    let sign_reports: Vec<PairSignReport> = pair_indices
        .iter()
        .map(|&pair| {
            let eta = detection_eta(args.eta, &cells, pair);
            detect_sign_treatments(&p, &[pair], eta).remove(0)
        })
        .collect();
    let assumption3 = check_assumption3(&sign_reports, k);
    let (det_string, det_f64) = exact_det_strings(&p);

    let quantiles = pooled_cell_quantiles(&cells)?;
    let mut moment_residuals = Vec::new();
    for &tau in &args.tau_grid {
        let y_vector: Vec<f64> = (0..=k).map(|t| quantiles(t, tau)).collect();
        let residual = crate::diagnostics::moment_residual(&y_vector, tau, &cells, &p)?;
        moment_residuals.push(MomentEntry {
            tau,
            max_abs_residual: residual.iter().fold(0.0f64, |a, r| a.max(r.abs())),
        });
    }

    Ok(DiagnoseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        propensity: p.rows().to_vec(),
        sign_reports,
        assumption3,
        propensity_determinant: det_string,
        propensity_determinant_f64: det_f64,
        determinant_sweep: kernel_sweep(&cells, &p, &args.tau_grid)?,
        moment_residuals,
    })
}

fn diagnose_matrix(path: &Path, args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| Error::ConfigInvalid(format!("bad propensity JSON: {e}")))?;
    let p = PropensityMatrix::from_rows(rows, 1e-9)?;
    let k = p.n_treatments() - 1;
    let labels: Vec<String> = (0..p.n_instruments()).map(|z| z.to_string()).collect();
    let pair_indices =
        label_pairs_to_indices(&args.pairs, &labels, all_pairs(p.n_instruments()))?;
    let sign_reports = detect_sign_treatments(&p, &pair_indices, 0.0);
    let assumption3 = check_assumption3(&sign_reports, k);
    let (det_string, det_f64) = exact_det_strings(&p);
    Ok(DiagnoseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        propensity: p.rows().to_vec(),
        sign_reports,
        assumption3,
        propensity_determinant: det_string,
        propensity_determinant_f64: det_f64,
        determinant_sweep: Vec::new(),
        moment_residuals: Vec::new(),
    })
}

fn diagnose_preset(name: &str, args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    let design = dgp::preset(name, args.k, 0)?;
    let analytic = dgp::AnalyticCells::new(&design.config);
    let p = PropensityMatrix::from_rows(analytic.propensity_rows().to_vec(), 1e-9)?;
    let k = design.config.k;
    let pair_indices = label_pairs_to_indices(
        &args.pairs,
        &design.config.instrument_labels,
        design.monotonicity.pairs.iter().map(|pm| pm.pair).collect(),
    )?;
    let sign_reports = detect_sign_treatments(&p, &pair_indices, 0.0);
    let assumption3 = check_assumption3(&sign_reports, k);
    let (det_string, det_f64) = exact_det_strings(&p);
    let input = JacobianInput {
        densities: &analytic,
        propensities: &p,
    };
    let quantiles = |t: usize, tau: f64| design.config.outcomes[t].quantile(tau);
    let sweep = determinant_sweep(&input, &quantiles, &args.tau_grid, SweepOptions::default())?;
    let mut moment_residuals = Vec::new();
    for &tau in &args.tau_grid {
        let y_vector: Vec<f64> = (0..=k).map(|t| quantiles(t, tau)).collect();
        let residual = crate::diagnostics::moment_residual(&y_vector, tau, &analytic, &p)?;
        moment_residuals.push(MomentEntry {
            tau,
            max_abs_residual: residual.iter().fold(0.0f64, |a, r| a.max(r.abs())),
        });
    }
    Ok(DiagnoseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        propensity: p.rows().to_vec(),
        sign_reports,
        assumption3,
        propensity_determinant: det_string,
        propensity_determinant_f64: det_f64,
        determinant_sweep: sweep,
        moment_residuals,
    })
}

fn exact_det_strings(p: &PropensityMatrix) -> (Option<String>, Option<f64>) {
    use num::ToPrimitive;
    match propensity_det_exact(p) {
        Ok(det) => {
            let as_f64 = det.to_f64();
            (Some(det.to_string()), as_f64)
        }
        Err(_) => (None, None),
    }
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct OracleArgs {
    pub preset: Option<String>,
    pub k: Option<usize>,
    pub dgp_config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub nodes: usize,
    pub grid_nodes: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub schema_version: u32,
    pub k: usize,
    pub grid_nodes: usize,
    pub grid_step: f64,
    /// Sup distance between pipeline maps and the exact analytic maps,
    /// over clean interior nodes.
    pub sup_vs_analytic: f64,
    /// Sup distance between pipeline solutions and the exhaustive grid
    /// search of the moment system, over the checked quantiles.
    pub sup_vs_grid_solve: Option<f64>,
    pub checked_nodes: usize,
    pub latent_identities_hold: Option<bool>,
}

pub fn run_oracle(args: &OracleArgs) -> Result<OracleReport> {
    fs::create_dir_all(&args.out_dir)?;
    let design = resolve_design(
        args.preset.as_deref(),
        args.k,
        args.dgp_config.as_deref(),
        args.seed,
    )?;
    let config = &design.config;
    let k = config.k;
    let analytic = dgp::AnalyticCells::new(config);
    let p = PropensityMatrix::from_rows(analytic.propensity_rows().to_vec(), 1e-9)?;

    // Window wide enough that interior maps stay inside.
    let (lo, hi) = analytic_window(config);
    let window = crate::cdf::SupportWindow::new(lo, hi, 0.0)?;
    let eval_grid = grid::uniform(&window, args.grid_nodes);
    let step = grid::max_step(&eval_grid);
    let solver_grid = grid::uniform(&window, (args.grid_nodes - 1) * SOLVER_OVERSAMPLE + 1);
    let tables = SystemTables::from_analytic(&analytic, &design.monotonicity, &solver_grid, 0.01)?;
    let maps = build_maps_on_grid(&tables, &eval_grid)?;

    // Pipeline vs exact analytic mappings on clean interior nodes.
    let mut sup_analytic = 0.0f64;
    let (first, last) = maps.clean_node_range().unwrap_or((0, 0));
    for s in 0..=k {
        for t in 0..=k {
            let map = maps.get(s, t);
            for (&y, &img) in map.grid().iter().zip(map.images()) {
                if y < eval_grid[first] || y > eval_grid[last] {
                    continue;
                }
                if let Ok(truth) = analytic_phi(config, s, t, y) {
                    if truth >= lo && truth <= hi {
                        sup_analytic = sup_analytic.max((img - truth).abs());
                    }
                }
            }
        }
    }

    // Pipeline vs exhaustive moment-system search at matched quantiles.
    let sup_grid = if k <= 2 {
        let mut sup = 0.0f64;
        let mut opts = GridSolveOptions::default();
        opts.spec = Some(design.monotonicity.clone());
        let source = tables.reference_source();
        for i in 1..=args.nodes {
            let tau = i as f64 / (args.nodes + 1) as f64;
            let tau = 0.05 + 0.9 * tau;
            let solve = grid_solve(tau, &analytic, &p, &eval_grid, &opts)?;
            if solve.saturated {
                continue;
            }
            let y_f = solve.best[source];
            let solution = crate::counterfactual::solve_general(
                &tables,
                y_f,
                crate::counterfactual::SolveOptions::default(),
            )?;
            for (canon, &img) in solution.images.iter().enumerate() {
                let t = tables.treatment_of()[canon];
                sup = sup.max((img - solve.best[t]).abs());
            }
        }
        Some(sup)
    } else {
        None
    };

    // Latent set identities on a small simulated draw.
    let data = dgp::simulate(config, 20_000)?;
    let stats = LatentComplierStats::from_dataset(&data)?;
    let taus: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let identities = stats.verify_identities(&data, &design.monotonicity, &taus)?;
    let identities_hold = identities.iter().all(|r| r.holds());

    let report = OracleReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        grid_nodes: args.grid_nodes,
        grid_step: step,
        sup_vs_analytic: sup_analytic,
        sup_vs_grid_solve: sup_grid,
        checked_nodes: args.nodes,
        latent_identities_hold: Some(identities_hold),
    };
    write_json(&args.out_dir.join("oracle.json"), &report)?;
    write_manifest(
        &args.out_dir,
        "oracle-check",
        Some(args.seed),
        None,
        args,
        &["oracle.json", "manifest.json"],
    )?;
    Ok(report)
}

/// A window covering the bulk of every arm's outcome distribution.
fn analytic_window(config: &DgpConfig) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for dist in &config.outcomes {
        lo = lo.min(dist.quantile(1e-4));
        hi = hi.max(dist.quantile(1.0 - 1e-4));
    }
    (lo, hi)
}
