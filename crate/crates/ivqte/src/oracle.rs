//! Independent ground-truth engines used to validate the main pipeline:
//! exhaustive grid search over the quantile moment system, exact analytic
//! counterfactual mappings from a known design, and exact latent complier
//! statistics from simulated data.
//!
//! Nothing here calls the solver module; the moment system is re-implemented
//! directly from cell CDFs so agreement between the two routes is evidence,
//! not tautology.

use crate::cdf::Ecdf;
use crate::compliers::{OutcomeCdf, PropensityMatrix};
use crate::dgp::{Dataset, DgpConfig};
use crate::error::{Error, Result};
use crate::monotonicity::MonotonicitySpec;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GridSolveOptions {
    /// Residual bound for membership in the returned solution set.
    pub tol: f64,
    /// Refuse scans with more candidates than this.
    pub cap: u128,
    /// Pair structure, required for the nested search once `k >= 3`.
    pub spec: Option<MonotonicitySpec>,
}

impl Default for GridSolveOptions {
    fn default() -> Self {
        GridSolveOptions {
            tol: 0.02,
            cap: 256u128.pow(3),
            spec: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridSolve {
    /// The residual-minimizing candidate `(y_0, ..., y_k)`.
    pub best: Vec<f64>,
    pub best_residual: f64,
    /// All candidates with sup-norm residual at or below `tol` (bounded).
    pub solutions: Vec<Vec<f64>>,
    /// The minimizer sits on the grid boundary, typically a `tau` the
    /// trimmed grid cannot reach.
    pub saturated: bool,
}

const MAX_STORED_SOLUTIONS: usize = 10_000;

/// Search the full candidate grid for vectors solving the moment system at
/// `tau`. Exhaustive for `k <= 2`; for larger `k` the candidate count is
/// infeasible and a nested monotone scan over the complier system is used
/// instead (a weaker, stated form of exhaustiveness).
pub fn grid_solve(
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    grid: &[f64],
    opts: &GridSolveOptions,
) -> Result<GridSolve> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange(tau));
    }
    let k = p.n_treatments() - 1;
    let n = grid.len() as u128;
    let candidates = n.checked_pow(k as u32 + 1).unwrap_or(u128::MAX);
    if k <= 2 {
        if candidates > opts.cap {
            return Err(Error::GridTooLarge {
                candidates,
                cap: opts.cap,
            });
        }
        exhaustive_scan(tau, cells, p, grid, k, opts)
    } else {
        let spec = opts.spec.as_ref().ok_or_else(|| {
            Error::ConfigInvalid(
                "grid_solve needs the pair structure for the nested search at k >= 3".into(),
            )
        })?;
        nested_scan(tau, cells, p, grid, spec, opts)
    }
}

fn pi_tables(
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    grid: &[f64],
) -> Vec<Vec<Vec<f64>>> {
    // weighted[t][z][i] = F(grid[i] | t, z) * p_t(z); residual per z is the
    // sum over t minus tau, which the scan assembles incrementally.
    let k = p.n_treatments() - 1;
    let m = p.n_instruments();
    let _ = tau;
    (0..=k)
        .map(|t| {
            (0..m)
                .map(|z| {
                    let weight = p.get(z, t);
                    grid.iter().map(|&y| cells.cdf(t, z, y) * weight).collect()
                })
                .collect()
        })
        .collect()
}

fn exhaustive_scan(
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    grid: &[f64],
    k: usize,
    opts: &GridSolveOptions,
) -> Result<GridSolve> {
    let weighted = pi_tables(tau, cells, p, grid);
    let m = p.n_instruments();
    let n = grid.len();
    let mut best = vec![0usize; k + 1];
    let mut best_residual = f64::INFINITY;
    let mut solutions: Vec<Vec<usize>> = Vec::new();

    let mut consider = |idx: &[usize], residual: f64, solutions: &mut Vec<Vec<usize>>| {
        if residual < best_residual {
            best_residual = residual;
            best.copy_from_slice(idx);
        }
        if residual <= opts.tol && solutions.len() < MAX_STORED_SOLUTIONS {
            solutions.push(idx.to_vec());
        }
    };

    match k {
        1 => {
            for i0 in 0..n {
                for i1 in 0..n {
                    let mut residual = 0.0f64;
                    for z in 0..m {
                        let r = weighted[0][z][i0] + weighted[1][z][i1] - tau;
                        residual = residual.max(r.abs());
                    }
                    consider(&[i0, i1], residual, &mut solutions);
                }
            }
        }
        2 => {
            let mut partial = vec![0.0f64; m];
            for i0 in 0..n {
                for i1 in 0..n {
                    for z in 0..m {
                        partial[z] = weighted[0][z][i0] + weighted[1][z][i1] - tau;
                    }
                    for i2 in 0..n {
                        let mut residual = 0.0f64;
                        for z in 0..m {
                            let r = partial[z] + weighted[2][z][i2];
                            let r = r.abs();
                            if r > residual {
                                residual = r;
                            }
                        }
                        consider(&[i0, i1, i2], residual, &mut solutions);
                    }
                }
            }
        }
        _ => unreachable!("exhaustive scan only runs for k <= 2"),
    }

    let saturated = best.iter().any(|&i| i == 0 || i + 1 == n);
    Ok(GridSolve {
        best: best.iter().map(|&i| grid[i]).collect(),
        best_residual,
        solutions: solutions
            .into_iter()
            .map(|idx| idx.into_iter().map(|i| grid[i]).collect())
            .collect(),
        saturated,
    })
}

/// Complier tables recomputed directly from cell CDFs for the nested scan;
/// an intentionally separate, linear-scan reimplementation.
struct ScanTables {
    k: usize,
    treatment_of: Vec<usize>,
    /// `sign[i - 1]`: (probability, cdf values on the grid).
    sign: Vec<(f64, Vec<f64>)>,
    /// `off[i - 1][canonical j]`: same, with a placeholder at `j = i`.
    off: Vec<Vec<(f64, Vec<f64>)>>,
}

fn scan_tables(
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    grid: &[f64],
    spec: &MonotonicitySpec,
) -> Result<ScanTables> {
    let k = spec.k;
    let mut treatment_of = vec![spec.reference_treatment()];
    treatment_of.extend(spec.selected_signs());
    let canon_of = |t: usize| treatment_of.iter().position(|&x| x == t).unwrap();

    let mut sign = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k);
    let mut rows: Vec<(usize, (f64, Vec<f64>), Vec<(usize, (f64, Vec<f64>))>)> = Vec::new();
    for pair in spec.selected() {
        let sign_t = pair.sign_treatment.expect("validated spec");
        let (z_plus, z_minus) = pair.oriented()?;
        let table = |t: usize, z_lo: usize, z_hi: usize| -> (f64, Vec<f64>) {
            let mass = p.get(z_hi, t) - p.get(z_lo, t);
            let mut running = 0.0f64;
            let values = grid
                .iter()
                .map(|&y| {
                    let raw = (cells.cdf(t, z_hi, y) * p.get(z_hi, t)
                        - cells.cdf(t, z_lo, y) * p.get(z_lo, t))
                        / mass;
                    running = running.max(raw.clamp(0.0, 1.0));
                    running
                })
                .collect();
            (mass, values)
        };
        let sign_table = table(sign_t, z_minus, z_plus);
        let mut off_tables = Vec::new();
        for t in 0..=k {
            if t == sign_t {
                continue;
            }
            off_tables.push((canon_of(t), table(t, z_plus, z_minus)));
        }
        rows.push((canon_of(sign_t), sign_table, off_tables));
    }
    rows.sort_by_key(|(canon, _, _)| *canon);
    for (_, sign_table, off_tables) in rows {
        let mut row = vec![(0.0, Vec::new()); k + 1];
        for (j, table) in off_tables {
            row[j] = table;
        }
        sign.push(sign_table);
        off.push(row);
    }
    Ok(ScanTables {
        k,
        treatment_of,
        sign,
        off,
    })
}

impl ScanTables {
    /// Solve the level-`m` subsystem by full linear scans, verifying the
    /// single-crossing property as it goes.
    fn solve_level(
        &self,
        m: usize,
        top_idx: usize,
        offsets: &[f64],
        n: usize,
    ) -> Result<Vec<usize>> {
        let target = self.sign[m - 1].1[top_idx] * self.sign[m - 1].0 - offsets[m - 1];
        if m == 1 {
            let (p0, values) = &self.off[0][0];
            let arg = (target / p0).clamp(0.0, 1.0);
            let idx = values.partition_point(|&v| v < arg);
            return Ok(vec![idx.min(n - 1)]);
        }
        let child_offsets: Vec<f64> = (1..m)
            .map(|i| offsets[i - 1] + self.off[i - 1][m].1[top_idx] * self.off[i - 1][m].0)
            .collect();
        let mut crossing = n - 1;
        let mut last_g = f64::NEG_INFINITY;
        let mut found = false;
        for idx in 0..n {
            let child = self.solve_level(m - 1, idx, &child_offsets, n)?;
            let mut g = self.off[m - 1][m - 1].1[idx] * self.off[m - 1][m - 1].0;
            for (j, &x) in child.iter().enumerate() {
                g += self.off[m - 1][j].1[x] * self.off[m - 1][j].0;
            }
            if g < last_g - 1e-12 {
                return Err(Error::NonMonotoneBracketing { index: idx });
            }
            last_g = g;
            if !found && g >= target {
                crossing = idx;
                found = true;
            }
        }
        let mut xs = self.solve_level(m - 1, crossing, &child_offsets, n)?;
        xs.push(crossing);
        Ok(xs)
    }
}

fn nested_scan(
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    grid: &[f64],
    spec: &MonotonicitySpec,
    opts: &GridSolveOptions,
) -> Result<GridSolve> {
    let tables = scan_tables(cells, p, grid, spec)?;
    let k = tables.k;
    let n = grid.len();
    let m = p.n_instruments();

    // Mixture CDF of the top coordinate, averaged over instrument values,
    // then solve the complier system at its tau-quantile.
    let top_t = tables.treatment_of[k];
    let offsets = vec![0.0; k];
    let mut mixture = Vec::with_capacity(n);
    for idx in 0..n {
        let xs = tables.solve_level(k, idx, &offsets, n)?;
        let mut total = 0.0;
        for z in 0..m {
            let mut fz = cells.cdf(top_t, z, grid[idx]) * p.get(z, top_t);
            for (canon, &x) in xs.iter().enumerate() {
                let t = tables.treatment_of[canon];
                fz += cells.cdf(t, z, grid[x]) * p.get(z, t);
            }
            total += fz;
        }
        mixture.push(total / m as f64);
    }
    let top_idx = mixture
        .iter()
        .position(|&f| f >= tau)
        .unwrap_or(n - 1);
    let xs = tables.solve_level(k, top_idx, &offsets, n)?;

    let mut best = vec![0.0; k + 1];
    best[top_t] = grid[top_idx];
    for (canon, &x) in xs.iter().enumerate() {
        best[tables.treatment_of[canon]] = grid[x];
    }
    let residual = moment_residual_direct(&best, tau, cells, p);
    let saturated = top_idx == 0 || top_idx + 1 == n;
    Ok(GridSolve {
        solutions: if residual <= opts.tol {
            vec![best.clone()]
        } else {
            Vec::new()
        },
        best,
        best_residual: residual,
        saturated,
    })
}

fn moment_residual_direct(
    y: &[f64],
    tau: f64,
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
) -> f64 {
    (0..p.n_instruments())
        .map(|z| {
            let total: f64 = y
                .iter()
                .enumerate()
                .map(|(t, &yt)| cells.cdf(t, z, yt) * p.get(z, t))
                .sum();
            (total - tau).abs()
        })
        .fold(0.0, f64::max)
}

/// Exact counterfactual mapping of a known design: the target quantile
/// function composed with the source CDF.
pub fn analytic_phi(config: &DgpConfig, s: usize, t: usize, y: f64) -> Result<f64> {
    if s == t {
        return Ok(y);
    }
    let tau = config.outcomes[s].cdf(y);
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::RangeEscape(y));
    }
    Ok(config.outcomes[t].quantile(tau))
}

/// Exact complier sets enumerated from latent records.
#[derive(Debug, Clone)]
pub struct LatentComplierStats {
    n: usize,
    k: usize,
    /// Unit indices of `C^t_{z, z'} = {D^t_z = 0, D^t_{z'} = 1}`.
    sets: BTreeMap<(usize, usize, usize), Vec<u32>>,
}

impl LatentComplierStats {
    /// Enumerate every ordered instrument pair and treatment.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let latent = data.latent_records()?;
        let m = data.n_instruments();
        let k = data.k;
        let mut sets: BTreeMap<(usize, usize, usize), Vec<u32>> = BTreeMap::new();
        for z in 0..m {
            for z_prime in 0..m {
                if z == z_prime {
                    continue;
                }
                for t in 0..=k {
                    sets.insert((z, z_prime, t), Vec::new());
                }
            }
        }
        for (unit, rec) in latent.iter().enumerate() {
            for z in 0..m {
                for z_prime in 0..m {
                    if z == z_prime {
                        continue;
                    }
                    let t_at_zp = rec.potential_treatments[z_prime];
                    if rec.potential_treatments[z] != t_at_zp {
                        sets.get_mut(&(z, z_prime, t_at_zp))
                            .unwrap()
                            .push(unit as u32);
                    }
                }
            }
        }
        Ok(LatentComplierStats {
            n: latent.len(),
            k,
            sets,
        })
    }

    pub fn set(&self, z: usize, z_prime: usize, t: usize) -> &[u32] {
        self.sets
            .get(&(z, z_prime, t))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn frequency(&self, z: usize, z_prime: usize, t: usize) -> f64 {
        self.set(z, z_prime, t).len() as f64 / self.n as f64
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// ECDF of a latent potential outcome over a complier set.
    pub fn outcome_ecdf(
        &self,
        data: &Dataset,
        set: &[u32],
        t_prime: usize,
    ) -> Result<Ecdf> {
        let latent = data.latent_records()?;
        let values: Vec<f64> = set
            .iter()
            .map(|&i| latent[i as usize].potential_outcomes[t_prime])
            .collect();
        Ecdf::from_samples(&values)
    }

    /// ECDF of a latent rank variable over a complier set.
    pub fn rank_ecdf(&self, data: &Dataset, set: &[u32], t_prime: usize) -> Result<Ecdf> {
        let latent = data.latent_records()?;
        let values: Vec<f64> = set
            .iter()
            .map(|&i| latent[i as usize].rank_variables[t_prime])
            .collect();
        Ecdf::from_samples(&values)
    }

    /// Verify the set identities implied by the selected pairs: the group
    /// pushed into each sign treatment is the disjoint union of the groups
    /// pushed out of the other treatments, and the joint rank counts add up
    /// exactly at every level.
    pub fn verify_identities(
        &self,
        data: &Dataset,
        spec: &MonotonicitySpec,
        tau_grid: &[f64],
    ) -> Result<Vec<IdentityReport>> {
        let latent = data.latent_records()?;
        let mut out = Vec::new();
        for pair in spec.selected() {
            let sign_t = pair.sign_treatment.expect("validated spec");
            let (z_plus, z_minus) = pair.oriented()?;
            let sign_set = self.set(z_minus, z_plus, sign_t);
            let mut union: Vec<u32> = Vec::new();
            let mut disjoint = true;
            let mut off_sets: Vec<&[u32]> = Vec::new();
            for t in 0..=self.k {
                if t == sign_t {
                    continue;
                }
                off_sets.push(self.set(z_plus, z_minus, t));
            }
            for set in &off_sets {
                union.extend_from_slice(set);
            }
            union.sort_unstable();
            let before = union.len();
            union.dedup();
            disjoint &= union.len() == before;
            let union_matches = union.as_slice() == sign_set;

            // Joint rank-count balance at each tau.
            let mut max_count_gap = 0usize;
            for &tau in tau_grid {
                let count_sign = sign_set
                    .iter()
                    .filter(|&&i| latent[i as usize].rank_variables[sign_t] <= tau)
                    .count();
                let count_off: usize = off_sets
                    .iter()
                    .map(|set| {
                        set.iter()
                            .filter(|&&i| latent[i as usize].rank_variables[sign_t] <= tau)
                            .count()
                    })
                    .sum();
                max_count_gap = max_count_gap.max(count_sign.abs_diff(count_off));
            }
            out.push(IdentityReport {
                pair: pair.pair,
                sign_treatment: sign_t,
                union_matches,
                disjoint,
                max_count_gap,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct IdentityReport {
    pub pair: (usize, usize),
    pub sign_treatment: usize,
    /// Sign-group set equals the union of the off-group sets, exactly.
    pub union_matches: bool,
    /// The off-group sets are pairwise disjoint.
    pub disjoint: bool,
    /// Largest absolute gap in the joint rank-count balance over the tau grid.
    pub max_count_gap: usize,
}

impl IdentityReport {
    pub fn holds(&self) -> bool {
        self.union_matches && self.disjoint && self.max_count_gap == 0
    }
}
