//! Assumption checking and the moment-system comparison: sign-treatment
//! detection from propensity differences, the different-monotonicity-types
//! condition, moment residuals of the quantile system, and the Jacobian
//! determinant of cell densities times propensities.

use crate::cdf::Ecdf;
use crate::compliers::{Cells, OutcomeCdf, PropensityMatrix};
use crate::dgp::AnalyticCells;
use crate::error::{Error, Result};
use num::{BigRational, Signed, Zero};
use serde::Serialize;

/// Outcome of sign detection for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignDetection {
    /// A unique treatment's propensity difference opposes all others.
    Treatment(usize),
    /// No treatment qualifies (possible once treatments exceed three values).
    NoSign,
    /// Several treatments qualify after small differences are zeroed.
    Ambiguous,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairSignReport {
    pub pair: (usize, usize),
    /// `p_t(z1) - p_t(z2)` per treatment.
    pub differences: Vec<f64>,
    pub result: SignDetection,
    /// Complier mass moved toward the sign treatment, when one exists.
    pub sign_mass: Option<f64>,
    /// Smallest complier mass across the pair's groups; every identified
    /// table divides by its own mass, so this drives plug-in variance.
    pub min_mass: Option<f64>,
}

/// Detect the sign treatment of each pair from the propensity matrix.
/// Differences with magnitude at most `eta` are treated as zero.
pub fn detect_sign_treatments(
    p: &PropensityMatrix,
    pairs: &[(usize, usize)],
    eta: f64,
) -> Vec<PairSignReport> {
    pairs
        .iter()
        .map(|&pair| {
            let differences = p.differences(pair);
            let zeroed: Vec<f64> = differences
                .iter()
                .map(|&d| if d.abs() <= eta { 0.0 } else { d })
                .collect();
            let candidates: Vec<usize> = (0..zeroed.len())
                .filter(|&t| {
                    zeroed[t] != 0.0
                        && zeroed
                            .iter()
                            .enumerate()
                            .all(|(j, &d)| j == t || d * zeroed[t] <= 0.0)
                })
                .collect();
            let result = match candidates.as_slice() {
                [t] => SignDetection::Treatment(*t),
                [] => SignDetection::NoSign,
                _ => SignDetection::Ambiguous,
            };
            let (sign_mass, min_mass) = match result {
                SignDetection::Treatment(t) => (
                    Some(differences[t].abs()),
                    differences
                        .iter()
                        .map(|d| d.abs())
                        .min_by(|a, b| a.partial_cmp(b).unwrap()),
                ),
                _ => (None, None),
            };
            PairSignReport {
                pair,
                differences,
                result,
                sign_mass,
                min_mass,
            }
        })
        .collect()
}

/// Verdict of the different-monotonicity-types condition.
#[derive(Debug, Clone, Serialize)]
pub enum Assumption3 {
    /// Indices (into the detection report) of `k` pairs with pairwise
    /// distinct sign treatments, chosen to maximize the smallest moved mass.
    Satisfied { lambda_star: Vec<usize> },
    Violated { reason: String },
}

impl Assumption3 {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, Assumption3::Satisfied { .. })
    }
}

/// Search the detected pairs for `k` distinct sign treatments.
pub fn check_assumption3(reports: &[PairSignReport], k: usize) -> Assumption3 {
    use std::collections::BTreeMap;
    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (idx, report) in reports.iter().enumerate() {
        if let SignDetection::Treatment(t) = report.result {
            let mass = report.min_mass.unwrap_or(0.0);
            let entry = best.entry(t).or_insert((idx, mass));
            if mass > entry.1 {
                *entry = (idx, mass);
            }
        }
    }
    if best.len() < k {
        let signs: Vec<usize> = best.keys().copied().collect();
        let reason = if best.len() == 1 {
            format!(
                "all usable pairs share one sign treatment ({})",
                signs[0]
            )
        } else {
            format!(
                "only {} distinct sign treatments among the pairs, need {k}",
                best.len()
            )
        };
        return Assumption3::Violated { reason };
    }
    // Drop the weakest signs when more than k are available.
    let mut chosen: Vec<(usize, f64)> = best.values().copied().collect();
    chosen.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    chosen.truncate(k);
    let mut lambda_star: Vec<usize> = chosen.into_iter().map(|(idx, _)| idx).collect();
    lambda_star.sort_unstable();
    Assumption3::Satisfied { lambda_star }
}

/// Residual vector of the quantile moment system at a candidate quantile
/// vector: one entry per instrument value.
pub fn moment_residual(
    y_vector: &[f64],
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange(tau));
    }
    if y_vector.len() != p.n_treatments() {
        return Err(Error::LengthMismatch {
            left: y_vector.len(),
            right: p.n_treatments(),
        });
    }
    (0..p.n_instruments())
        .map(|z| {
            let mut total = -tau;
            for (t, &y) in y_vector.iter().enumerate() {
                let weight = p.get(z, t);
                if weight == 0.0 {
                    continue;
                }
                if !cells.has_cell(t, z) {
                    return Err(Error::EmptyCell { t, z });
                }
                total += cells.cdf(t, z, y) * weight;
            }
            Ok(total)
        })
        .collect()
}

/// Density evaluator per observed cell, the analytic or kernel-estimated
/// ingredient of the Jacobian.
pub trait DensityEval {
    fn density(&self, t: usize, z: usize, y: f64) -> f64;

    /// True when densities do not depend on the instrument value, so the
    /// determinant factors into a density product times the propensity
    /// determinant.
    fn instrument_independent(&self) -> bool {
        false
    }
}

impl DensityEval for AnalyticCells {
    fn density(&self, t: usize, z: usize, y: f64) -> f64 {
        self.cell_density(t, z, y)
    }

    fn instrument_independent(&self) -> bool {
        self.config().utility.endogeneity.iter().all(|&e| e == 0.0)
    }
}

/// Kernel density estimates per cell, Gaussian kernel with the standard
/// `1.06 sigma n^{-1/5}` bandwidth.
pub struct KernelCells<'a> {
    cells: &'a Cells,
}

impl<'a> KernelCells<'a> {
    pub fn new(cells: &'a Cells) -> Self {
        KernelCells { cells }
    }
}

impl DensityEval for KernelCells<'_> {
    fn density(&self, t: usize, z: usize, y: f64) -> f64 {
        kernel_density(self.cells.cell_values(t, z), y).unwrap_or(0.0)
    }
}

/// Jacobian ingredients: densities and propensities on matching index sets.
pub struct JacobianInput<'a> {
    pub densities: &'a dyn DensityEval,
    pub propensities: &'a PropensityMatrix,
}

/// Determinant of the matrix `M[z][t] = f(y_t | t, z) p_t(z)`, which must be
/// square: as many instrument values as treatments.
pub fn jacobian_determinant(input: &JacobianInput, y_vector: &[f64]) -> Result<f64> {
    let p = input.propensities;
    let rows = p.n_instruments();
    let cols = p.n_treatments();
    if rows != cols || y_vector.len() != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let matrix: Vec<Vec<f64>> = (0..rows)
        .map(|z| {
            (0..cols)
                .map(|t| input.densities.density(t, z, y_vector[t]) * p.get(z, t))
                .collect()
        })
        .collect();
    Ok(det_f64(matrix))
}

/// Factored determinant under instrument-independent densities: the product
/// of marginal densities times the propensity determinant.
pub fn jacobian_factored(input: &JacobianInput, y_vector: &[f64]) -> Result<f64> {
    let p = input.propensities;
    let rows = p.n_instruments();
    let cols = p.n_treatments();
    if rows != cols || y_vector.len() != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let density_product: f64 = y_vector
        .iter()
        .enumerate()
        .map(|(t, &y)| input.densities.density(t, 0, y))
        .product();
    let prop_matrix: Vec<Vec<f64>> = (0..rows)
        .map(|z| (0..cols).map(|t| p.get(z, t)).collect())
        .collect();
    Ok(density_product * det_f64(prop_matrix))
}

/// Plain LU determinant with partial pivoting.
pub fn det_f64(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        for row in (col + 1)..n {
            let factor = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= factor * m[col][c];
            }
        }
    }
    det
}

/// Exact determinant of the propensity matrix in rational arithmetic.
/// Entries must be exactly representable (dyadic), which binary floating
/// point guarantees.
pub fn propensity_det_exact(p: &PropensityMatrix) -> Result<BigRational> {
    let n = p.n_instruments();
    if n != p.n_treatments() {
        return Err(Error::NotSquare {
            rows: n,
            cols: p.n_treatments(),
        });
    }
    let mut m: Vec<Vec<BigRational>> = (0..n)
        .map(|z| {
            (0..n)
                .map(|t| BigRational::from_float(p.get(z, t)).expect("finite entry"))
                .collect()
        })
        .collect();
    let mut det = BigRational::from_float(1.0).unwrap();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !m[r][col].is_zero());
        let pivot = match pivot {
            Some(r) => r,
            None => return Ok(BigRational::zero()),
        };
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col].clone();
        for row in (col + 1)..n {
            let factor = &m[row][col] / &m[col][col];
            for c in col..n {
                let sub = &factor * &m[col][c];
                m[row][c] -= sub;
            }
        }
    }
    Ok(det)
}

/// Gaussian kernel density estimate at `y` with Silverman's bandwidth
/// `1.06 sigma n^{-1/5}`.
pub fn kernel_density(samples: &[f64], y: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = variance.sqrt();
    if sd == 0.0 {
        return Err(Error::DegenerateSupport {
            lower: samples[0],
            upper: samples[0],
        });
    }
    let bandwidth = 1.06 * sd * nf.powf(-0.2);
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let total: f64 = samples
        .iter()
        .map(|&x| {
            let u = (y - x) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum();
    Ok(total / (nf * bandwidth * norm))
}

/// Bounds used when sweeping the determinant over quantile levels; the sweep
/// stays inside `[delta, 1 - delta]` and entries where any marginal density
/// falls below the floor are flagged rather than trusted.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepOptions {
    pub delta: f64,
    pub density_floor: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            delta: 0.05,
            density_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub tau: f64,
    pub y_vector: Vec<f64>,
    pub determinant: f64,
    pub below_density_floor: bool,
}

/// Evaluate the determinant along quantile vectors `(Q_0(tau), ..., Q_k(tau))`
/// computed from per-treatment sample quantiles.
pub fn determinant_sweep(
    input: &JacobianInput,
    quantiles: &dyn Fn(usize, f64) -> f64,
    taus: &[f64],
    opts: SweepOptions,
) -> Result<Vec<SweepEntry>> {
    let k = input.propensities.n_treatments() - 1;
    let mut out = Vec::new();
    for &tau in taus {
        if tau < opts.delta || tau > 1.0 - opts.delta {
            continue;
        }
        let y_vector: Vec<f64> = (0..=k).map(|t| quantiles(t, tau)).collect();
        let determinant = jacobian_determinant(input, &y_vector)?;
        let below = y_vector
            .iter()
            .enumerate()
            .any(|(t, &y)| input.densities.density(t, 0, y) < opts.density_floor);
        out.push(SweepEntry {
            tau,
            y_vector,
            determinant,
            below_density_floor: below,
        });
    }
    Ok(out)
}

/// Convenience: per-treatment pooled sample quantiles of a dataset.
pub fn pooled_cell_quantiles(cells: &Cells) -> Result<impl Fn(usize, f64) -> f64> {
    let k = cells.k();
    let m = cells.n_instruments();
    let mut ecdfs = Vec::with_capacity(k + 1);
    for t in 0..=k {
        let mut pooled = Vec::new();
        for z in 0..m {
            pooled.extend_from_slice(cells.cell_values(t, z));
        }
        ecdfs.push(Ecdf::from_samples(&pooled)?);
    }
    Ok(move |t: usize, tau: f64| ecdfs[t].quantile(tau).unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{self, OutcomeDistribution};
    use num::ToPrimitive;

    fn golden_matrix() -> PropensityMatrix {
        PropensityMatrix::from_rows(
            vec![
                vec![0.3125, 0.4375, 0.25],
                vec![0.25, 0.375, 0.375],
                vec![0.125, 0.3125, 0.5625],
            ],
            1e-12,
        )
        .unwrap()
    }

    #[test]
    fn golden_sign_treatments_all_two() {
        let p = golden_matrix();
        let pairs = vec![(1, 0), (2, 0), (2, 1)];
        let reports = detect_sign_treatments(&p, &pairs, 0.0);
        for r in &reports {
            assert_eq!(r.result, SignDetection::Treatment(2), "pair {:?}", r.pair);
        }
        assert!((reports[0].differences[0] + 0.0625).abs() < 1e-12);
        assert!((reports[0].differences[2] - 0.125).abs() < 1e-12);

        match check_assumption3(&reports, 2) {
            Assumption3::Violated { reason } => {
                assert!(reason.contains("share one sign treatment"), "{reason}")
            }
            Assumption3::Satisfied { .. } => panic!("must be violated"),
        }
    }

    #[test]
    fn example_design_signs_detected() {
        let design = dgp::example_i(2, 3).unwrap();
        let rows = dgp::analytic_propensity(&design.config);
        let p = PropensityMatrix::from_rows(rows, 1e-9).unwrap();
        let reports = detect_sign_treatments(&p, &[(1, 0), (2, 0)], 0.0);
        assert_eq!(reports[0].result, SignDetection::Treatment(1));
        assert_eq!(reports[1].result, SignDetection::Treatment(2));
        match check_assumption3(&reports, 2) {
            Assumption3::Satisfied { lambda_star } => assert_eq!(lambda_star, vec![0, 1]),
            Assumption3::Violated { reason } => panic!("{reason}"),
        }
    }

    #[test]
    fn four_level_no_sign_example() {
        let p = PropensityMatrix::from_rows(
            vec![
                vec![0.3, 0.3, 0.2, 0.2],
                vec![0.2, 0.2, 0.3, 0.3],
            ],
            1e-12,
        )
        .unwrap();
        let reports = detect_sign_treatments(&p, &[(0, 1)], 0.0);
        assert_eq!(reports[0].result, SignDetection::NoSign);
    }

    #[test]
    fn zeroed_difference_makes_ambiguous() {
        let p = PropensityMatrix::from_rows(
            vec![vec![0.4, 0.3, 0.3], vec![0.3, 0.3, 0.4]],
            1e-12,
        )
        .unwrap();
        let reports = detect_sign_treatments(&p, &[(0, 1)], 0.005);
        assert_eq!(reports[0].result, SignDetection::Ambiguous);
    }

    #[test]
    fn detection_is_relabeling_equivariant() {
        let p = golden_matrix();
        let reports = detect_sign_treatments(&p, &[(1, 0)], 0.0);
        // Relabel instruments by swapping rows 0 and 1: the pair (0, 1) in
        // the relabeled matrix is the pair (1, 0) in the original.
        let swapped = PropensityMatrix::from_rows(
            vec![
                vec![0.25, 0.375, 0.375],
                vec![0.3125, 0.4375, 0.25],
                vec![0.125, 0.3125, 0.5625],
            ],
            1e-12,
        )
        .unwrap();
        let swapped_reports = detect_sign_treatments(&swapped, &[(0, 1)], 0.0);
        assert_eq!(reports[0].result, swapped_reports[0].result);
        assert_eq!(reports[0].differences, swapped_reports[0].differences);
    }

    #[test]
    fn pigeonhole_violation_with_fewer_signs() {
        let design = dgp::example_i(3, 3).unwrap();
        let rows = dgp::analytic_propensity(&design.config);
        let p = PropensityMatrix::from_rows(rows, 1e-9).unwrap();
        let reports = detect_sign_treatments(&p, &[(1, 0), (2, 0)], 0.0);
        assert!(!check_assumption3(&reports, 3).is_satisfied());
    }

    #[test]
    fn golden_exact_determinant() {
        let p = golden_matrix();
        let det = propensity_det_exact(&p).unwrap();
        let expected = BigRational::from_float(-0.00390625).unwrap();
        assert_eq!(det, expected);
        assert_eq!(det.to_f64().unwrap(), -1.0 / 256.0);
    }

    struct UnitDensities;
    impl DensityEval for UnitDensities {
        fn density(&self, _t: usize, _z: usize, _y: f64) -> f64 {
            1.0
        }
        fn instrument_independent(&self) -> bool {
            true
        }
    }

    #[test]
    fn determinant_direct_equals_factored() {
        let p = golden_matrix();
        let densities = UnitDensities;
        let input = JacobianInput {
            densities: &densities,
            propensities: &p,
        };
        let y = vec![0.0, 1.0, 2.0];
        let direct = jacobian_determinant(&input, &y).unwrap();
        let factored = jacobian_factored(&input, &y).unwrap();
        assert!((direct - factored).abs() < 1e-12);
        assert!((direct + 0.00390625).abs() < 1e-12);
    }

    #[test]
    fn identity_propensity_gives_density_product() {
        let p = PropensityMatrix::from_rows(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            1e-12,
        )
        .unwrap();
        let densities = UnitDensities;
        let input = JacobianInput {
            densities: &densities,
            propensities: &p,
        };
        let det = jacobian_determinant(&input, &[0.3, 0.7]).unwrap();
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_singular() {
        let p = PropensityMatrix::from_rows(
            vec![
                vec![0.25, 0.375, 0.375],
                vec![0.25, 0.375, 0.375],
                vec![0.125, 0.3125, 0.5625],
            ],
            1e-12,
        )
        .unwrap();
        let densities = UnitDensities;
        let input = JacobianInput {
            densities: &densities,
            propensities: &p,
        };
        assert_eq!(jacobian_determinant(&input, &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(propensity_det_exact(&p).unwrap().is_zero());
    }

    #[test]
    fn rectangular_input_rejected() {
        let p = PropensityMatrix::from_rows(
            vec![vec![0.5, 0.5], vec![0.3, 0.7], vec![0.2, 0.8]],
            1e-12,
        )
        .unwrap();
        let densities = UnitDensities;
        let input = JacobianInput {
            densities: &densities,
            propensities: &p,
        };
        assert!(matches!(
            jacobian_determinant(&input, &[0.0, 1.0]),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn nonzero_determinant_when_assumption_satisfied() {
        // With distinct sign treatments and positive densities the Jacobian
        // is nonsingular at the true quantile vector.
        let mut design = dgp::example_i(2, 5).unwrap();
        design.config.utility.endogeneity = vec![0.0; 3];
        let analytic = dgp::AnalyticCells::new(&design.config);
        let p = PropensityMatrix::from_rows(analytic.propensity_rows().to_vec(), 1e-9).unwrap();
        let input = JacobianInput {
            densities: &analytic,
            propensities: &p,
        };
        let y: Vec<f64> = (0..=2)
            .map(|t| design.config.outcomes[t].quantile(0.5))
            .collect();
        let det = jacobian_determinant(&input, &y).unwrap();
        assert!(det.abs() > 1e-12, "determinant {det}");
    }

    #[test]
    fn moment_residual_zero_at_truth() {
        let mut design = dgp::example_i(2, 5).unwrap();
        design.config.utility.endogeneity = vec![0.0; 3];
        let analytic = dgp::AnalyticCells::new(&design.config);
        let p = golden_matrix();
        for tau in [0.25, 0.5, 0.75] {
            let y: Vec<f64> = (0..=2)
                .map(|t| design.config.outcomes[t].quantile(tau))
                .collect();
            let residual = moment_residual(&y, tau, &analytic, &p).unwrap();
            for r in residual {
                assert!(r.abs() < 1e-9, "tau {tau}: residual {r}");
            }
        }
    }

    #[test]
    fn moment_residual_below_support() {
        let mut design = dgp::example_i(2, 5).unwrap();
        design.config.utility.endogeneity = vec![0.0; 3];
        design.config.outcomes = vec![
            OutcomeDistribution::Uniform {
                lower: 0.0,
                upper: 1.0,
            };
            3
        ];
        let analytic = dgp::AnalyticCells::new(&design.config);
        let p = golden_matrix();
        let tau = 0.4;
        let residual = moment_residual(&[-10.0, -10.0, -10.0], tau, &analytic, &p).unwrap();
        for r in residual {
            assert!((r + tau).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_standard_normal_at_zero() {
        use rand::prelude::*;
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let value = kernel_density(&samples, 0.0).unwrap();
        assert!((value - 0.3989).abs() < 0.02, "kde {value}");
    }

    #[test]
    fn kde_symmetry_and_normalization() {
        let two = vec![0.0, 10.0];
        let at5 = kernel_density(&two, 5.0).unwrap();
        assert!(at5 > 0.0);
        let reflected = kernel_density(&[10.0, 0.0], 5.0).unwrap();
        assert!((at5 - reflected).abs() < 1e-15);

        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let samples: Vec<f64> = (0..2000)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let width = 0.01;
        let integral: f64 = (-300..300)
            .map(|i| kernel_density(&samples, i as f64 * width).unwrap() * width)
            .sum();
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }

    #[test]
    fn kde_needs_two_samples() {
        assert!(matches!(
            kernel_density(&[1.0], 0.0),
            Err(Error::TooFewSamples(1))
        ));
    }
}
