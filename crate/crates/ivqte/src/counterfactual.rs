//! Solving the simultaneous complier-CDF system for the counterfactual
//! mappings.
//!
//! After relabeling, the identification subset provides one equation per
//! nonzero treatment index `i`:
//!
//! ```text
//! F_i(x_i) * P_i = sum_{j != i} F_{i,j}(x_j) * P_{i,j},     i = 1..k,
//! ```
//!
//! where `F_i` is the outcome CDF of the group pushed into treatment `i` by
//! its own pair, `F_{i,j}` the CDF of the group pushed out of `j` by the same
//! pair, and `x_k = y_f` is fixed. The unique solution is
//! `x_j = phi_{k,j}(y_f)`.
//!
//! The solver fixes `y_f`, eliminates one unknown per level: the level-`m`
//! equation pins `x_{m-1}` as the inf-convention crossing point of a
//! nondecreasing aggregate `G` built from the level-`(m-1)` solutions, with
//! contributions of already-fixed coordinates absorbed as constant offsets.
//! Every tabulated CDF here is isotone, so `G` is nondecreasing by
//! construction and the crossing search is a certified bisection.

use crate::cdf::MonotoneCdf;
use crate::compliers::{complier_cdf, ComplierTable, OutcomeCdf, PropensityMatrix};
use crate::dgp::AnalyticCells;
use crate::error::{Error, Result};
use crate::maps::{compose_maps, CounterfactualMap};
pub use crate::monotonicity::{Direction, MonotonicitySpec, PairMonotonicity};

/// Tables entering one equation of the system.
#[derive(Debug, Clone)]
pub struct EquationTables {
    /// Group pushed into the equation's sign treatment; the left-hand side.
    pub sign: ComplierTable,
    /// Groups pushed out of each other treatment, keyed by canonical index.
    off: Vec<(usize, ComplierTable)>,
}

impl EquationTables {
    pub fn off_table(&self, canonical: usize) -> &ComplierTable {
        &self
            .off
            .iter()
            .find(|(j, _)| *j == canonical)
            .expect("off table exists for every canonical index != i")
            .1
    }

    pub fn off_tables(&self) -> &[(usize, ComplierTable)] {
        &self.off
    }

    /// Mass balance of the pair: sign-group mass minus summed off-group
    /// masses, zero up to propensity-row rounding.
    pub fn balance_residual(&self) -> f64 {
        self.sign.probability - self.off.iter().map(|(_, t)| t.probability).sum::<f64>()
    }
}

/// The complier tables of the selected pairs, relabeled so equation `i` has
/// sign treatment `treatment_of[i]` and `treatment_of[0]` is the reference.
#[derive(Debug, Clone)]
pub struct SystemTables {
    pub k: usize,
    grid: Vec<f64>,
    /// Canonical index -> actual treatment.
    treatment_of: Vec<usize>,
    /// Equation `i` lives at `equations[i - 1]`.
    equations: Vec<EquationTables>,
}

impl SystemTables {
    /// Build plug-in tables from estimated cells.
    pub fn from_data(
        cells: &impl OutcomeCdf,
        p: &PropensityMatrix,
        spec: &MonotonicitySpec,
        grid: &[f64],
        eta: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.k;
        let treatment_of = canonical_order(spec);
        let canon_of = invert_order(&treatment_of);
        let mut equations = Vec::with_capacity(k);
        for pair in spec.selected() {
            let sign_t = pair.sign_treatment.expect("validated");
            let (z_plus, z_minus) = pair.oriented()?;
            let sign = complier_cdf(cells, p, (z_minus, z_plus), sign_t, grid, eta)?;
            let mut off = Vec::with_capacity(k);
            for t in 0..=k {
                if t == sign_t {
                    continue;
                }
                let table = complier_cdf(cells, p, (z_plus, z_minus), t, grid, eta)?;
                off.push((canon_of[t], table));
            }
            off.sort_by_key(|(j, _)| *j);
            equations.push(EquationTables { sign, off });
        }
        // Equations must be ordered by their canonical sign index.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&i| canon_of[equations[i].sign.treatment]);
        let equations = order.into_iter().map(|i| equations[i].clone()).collect();
        Ok(SystemTables {
            k,
            grid: grid.to_vec(),
            treatment_of,
            equations,
        })
    }

    /// Build exact tables from the analytic design (quadrature-accurate).
    pub fn from_analytic(
        analytic: &AnalyticCells,
        spec: &MonotonicitySpec,
        grid: &[f64],
        eta: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.k;
        let rows = analytic.propensity_rows();
        let treatment_of = canonical_order(spec);
        let canon_of = invert_order(&treatment_of);
        let mut equations = Vec::with_capacity(k);
        for pair in spec.selected() {
            let sign_t = pair.sign_treatment.expect("validated");
            let (z_plus, z_minus) = pair.oriented()?;
            let make = |t: usize, z_from: usize, z_to: usize| -> Result<ComplierTable> {
                let probability = rows[z_to][t] - rows[z_from][t];
                if probability <= eta {
                    return Err(Error::WeakPair {
                        z: z_from,
                        z_prime: z_to,
                        t,
                        delta: probability,
                        eta,
                    });
                }
                let values: Vec<f64> = grid
                    .iter()
                    .map(|&y| analytic.complier_cdf(t, z_from, z_to, y))
                    .collect();
                Ok(ComplierTable {
                    pair: (z_from, z_to),
                    treatment: t,
                    direction: crate::compliers::FlowDirection::ZToZPrime,
                    probability,
                    cdf: MonotoneCdf::isotonize(grid.to_vec(), &values)?,
                })
            };
            let sign = make(sign_t, z_minus, z_plus)?;
            let mut off = Vec::with_capacity(k);
            for t in 0..=k {
                if t == sign_t {
                    continue;
                }
                off.push((canon_of[t], make(t, z_plus, z_minus)?));
            }
            off.sort_by_key(|(j, _)| *j);
            equations.push(EquationTables { sign, off });
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&i| canon_of[equations[i].sign.treatment]);
        let equations = order.into_iter().map(|i| equations[i].clone()).collect();
        Ok(SystemTables {
            k,
            grid: grid.to_vec(),
            treatment_of,
            equations,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn treatment_of(&self) -> &[usize] {
        &self.treatment_of
    }

    /// Actual treatment whose scale the solver maps from.
    pub fn reference_source(&self) -> usize {
        self.treatment_of[self.k]
    }

    pub fn equation(&self, i: usize) -> &EquationTables {
        &self.equations[i - 1]
    }

    /// Mass-balance residuals, one per equation.
    pub fn balance_residuals(&self) -> Vec<f64> {
        self.equations
            .iter()
            .map(EquationTables::balance_residual)
            .collect()
    }
}

fn canonical_order(spec: &MonotonicitySpec) -> Vec<usize> {
    let mut order = vec![spec.reference_treatment()];
    order.extend(spec.selected_signs());
    order
}

fn invert_order(treatment_of: &[usize]) -> Vec<usize> {
    let mut canon_of = vec![0usize; treatment_of.len()];
    for (canon, &t) in treatment_of.iter().enumerate() {
        canon_of[t] = canon;
    }
    canon_of
}

/// Solver diagnostics accumulated across the recursion.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveFlags {
    /// The crossing target exceeded the aggregate everywhere; the boundary
    /// grid point was returned.
    pub saturated: bool,
    /// Nested quantile arguments clipped to [0, 1].
    pub clipped: usize,
    /// The aggregate is flat at the crossing: the inf point of a set-valued
    /// solution was returned.
    pub flat: bool,
}

impl SolveFlags {
    pub fn clean(&self) -> bool {
        !self.saturated && self.clipped == 0
    }
}

/// A solved node: images `phi_{k,j}(y_f)` in canonical coordinate order.
#[derive(Debug, Clone)]
pub struct Solution {
    /// `images[j] = phi_{k,j}(y_f)` for canonical `j = 0..k-1`.
    pub images: Vec<f64>,
    pub indices: Vec<usize>,
    pub flags: SolveFlags,
    /// Per-equation residuals of the system at the solution, in CDF units.
    pub residuals: Vec<f64>,
}

struct Engine<'a> {
    tables: &'a SystemTables,
    n: usize,
}

impl<'a> Engine<'a> {
    fn new(tables: &'a SystemTables) -> Self {
        Engine {
            tables,
            n: tables.grid.len(),
        }
    }

    /// Solve the level-`m` subsystem given the level's fixed top value,
    /// described by the CDF evaluations of every table at that value.
    ///
    /// `offsets[i - 1]` carries the absorbed contributions of coordinates
    /// above `m` to equation `i`.
    fn solve(
        &self,
        m: usize,
        top: &TopEval,
        offsets: &[f64],
        flags: &mut SolveFlags,
    ) -> Result<Vec<usize>> {
        let eq = self.tables.equation(m);
        let target = top.sign(eq) * eq.sign.probability - offsets[m - 1];
        if m == 1 {
            let off0 = eq.off_table(0);
            let mut arg = target / off0.probability;
            if !(0.0..=1.0).contains(&arg) {
                flags.clipped += 1;
                arg = arg.clamp(0.0, 1.0);
            }
            let (idx, saturated) = off0.cdf.quantile_index(arg);
            flags.saturated |= saturated;
            return Ok(vec![idx]);
        }

        let child_offsets: Vec<f64> = (1..m)
            .map(|i| {
                let eq_i = self.tables.equation(i);
                offsets[i - 1] + top.off(eq_i, m) * eq_i.off_table(m).probability
            })
            .collect();

        let eval_g = |idx: usize, flags: &mut SolveFlags| -> Result<f64> {
            let child = self.solve(m - 1, &TopEval::Node(idx), &child_offsets, flags)?;
            let mut g = eq.off_table(m - 1).cdf.value_at(idx) * eq.off_table(m - 1).probability;
            for (j, &x) in child.iter().enumerate() {
                let table = eq.off_table(j);
                g += table.cdf.value_at(x) * table.probability;
            }
            Ok(g)
        };

        // Inf-convention crossing search; g is nondecreasing by construction.
        // Probes run with scratch flags: clipping or saturation at probe
        // points away from the solution is not a property of the solution.
        let mut scratch = SolveFlags::default();
        let mut probes: Vec<(usize, f64)> = Vec::new();
        let mut lo = 0usize;
        let mut hi = self.n - 1;
        let g_hi = eval_g(hi, &mut scratch)?;
        probes.push((hi, g_hi));
        let crossing = if g_hi < target {
            flags.saturated = true;
            hi
        } else {
            let g_lo = eval_g(lo, &mut scratch)?;
            probes.push((lo, g_lo));
            if g_lo >= target {
                lo
            } else {
                while lo + 1 < hi {
                    let mid = lo + (hi - lo) / 2;
                    let g_mid = eval_g(mid, &mut scratch)?;
                    probes.push((mid, g_mid));
                    if g_mid >= target {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        };

        // Certify the bracketing property on every probed point.
        probes.sort_by_key(|&(idx, _)| idx);
        for w in probes.windows(2) {
            if w[1].1 < w[0].1 - 1e-12 {
                return Err(Error::NonMonotoneBracketing { index: w[1].0 });
            }
        }
        if crossing + 1 < self.n {
            let g_at = probes
                .iter()
                .find(|&&(i, _)| i == crossing)
                .map(|&(_, g)| g);
            if let Some(g_at) = g_at {
                let g_next = eval_g(crossing + 1, &mut scratch)?;
                flags.flat |= g_next == g_at;
            }
        }

        let mut xs = self.solve(m - 1, &TopEval::Node(crossing), &child_offsets, flags)?;
        xs.push(crossing);
        Ok(xs)
    }

    fn residuals(&self, y_f: f64, indices: &[usize]) -> Vec<f64> {
        let k = self.tables.k;
        (1..=k)
            .map(|i| {
                let eq = self.tables.equation(i);
                let lhs = if i == k {
                    // x_i for i = k is y_f itself only when i indexes the top;
                    // the sign CDF of equation k is evaluated at x_k = y_f.
                    eq.sign.cdf.eval(y_f)
                } else {
                    eq.sign.cdf.value_at(indices[i])
                };
                let mut rhs = 0.0;
                for (j, table) in eq.off_tables() {
                    let value = if *j == k {
                        table.cdf.eval(y_f)
                    } else {
                        table.cdf.value_at(indices[*j])
                    };
                    rhs += value * table.probability;
                }
                lhs - rhs / eq.sign.probability
            })
            .collect()
    }

    /// Largest CDF increment adjacent to the solution, the natural residual
    /// tolerance for grid-valued step-function solutions.
    fn local_increment(&self, y_f: f64, indices: &[usize]) -> f64 {
        let mut inc = 0.0f64;
        let k = self.tables.k;
        for i in 1..=k {
            let eq = self.tables.equation(i);
            if i < k {
                inc = inc.max(self.cdf_step(&eq.sign.cdf, indices[i]));
            }
            for (j, table) in eq.off_tables() {
                if *j < k {
                    inc = inc.max(
                        self.cdf_step(&table.cdf, indices[*j]) * table.probability
                            / eq.sign.probability,
                    );
                } else {
                    let idx = table.cdf.grid().partition_point(|&g| g <= y_f);
                    inc = inc.max(
                        self.cdf_step(&table.cdf, idx.min(self.n - 1)) * table.probability
                            / eq.sign.probability,
                    );
                }
            }
        }
        inc
    }

    fn cdf_step(&self, cdf: &MonotoneCdf, idx: usize) -> f64 {
        let lo = idx.saturating_sub(1);
        let hi = (idx + 1).min(self.n - 1);
        cdf.value_at(hi) - cdf.value_at(lo)
    }
}

/// How the fixed top coordinate enters the level's tables.
enum TopEval {
    /// The top value is a grid node.
    Node(usize),
    /// The top value is an arbitrary real (the caller's `y_f`).
    Value(f64),
}

impl TopEval {
    fn sign(&self, eq: &EquationTables) -> f64 {
        match *self {
            TopEval::Node(idx) => eq.sign.cdf.value_at(idx),
            TopEval::Value(y) => eq.sign.cdf.eval(y),
        }
    }

    fn off(&self, eq: &EquationTables, canonical: usize) -> f64 {
        match *self {
            TopEval::Node(idx) => eq.off_table(canonical).cdf.value_at(idx),
            TopEval::Value(y) => eq.off_table(canonical).cdf.eval(y),
        }
    }
}

/// Options for the certified solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Base residual tolerance in CDF units; the certificate allows
    /// `max(residual_tol, local grid-step increment)` per equation.
    pub residual_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { residual_tol: 1e-8 }
    }
}

fn solve_images(tables: &SystemTables, top: TopEval) -> Result<(Vec<usize>, SolveFlags)> {
    let engine = Engine::new(tables);
    let mut flags = SolveFlags::default();
    let offsets = vec![0.0; tables.k];
    let xs = engine.solve(tables.k, &top, &offsets, &mut flags)?;
    Ok((xs, flags))
}

/// Solve the full system at `y_f` and certify the residuals.
pub fn solve_general(tables: &SystemTables, y_f: f64, opts: SolveOptions) -> Result<Solution> {
    let engine = Engine::new(tables);
    let (indices, flags) = solve_images(tables, TopEval::Value(y_f))?;
    let residuals = engine.residuals(y_f, &indices);
    let tol = opts.residual_tol.max(engine.local_increment(y_f, &indices));
    let worst = residuals.iter().fold(0.0f64, |a, &r| a.max(r.abs()));
    let images: Vec<f64> = indices.iter().map(|&i| tables.grid[i]).collect();
    if worst > tol {
        return Err(Error::NoSolutionOnGrid {
            best_residual: worst,
            candidate: images,
        });
    }
    Ok(Solution {
        images,
        indices,
        flags,
        residuals,
    })
}

/// Closed-form binary-case map: the sign-group CDF pushed through the
/// generalized inverse of the off-group CDF, tabulated on the grid.
pub fn solve_binary(tables: &SystemTables) -> Result<(CounterfactualMap, SolveFlags)> {
    if tables.k != 1 {
        return Err(Error::ConfigInvalid(format!(
            "solve_binary needs k = 1, got {}",
            tables.k
        )));
    }
    let eq = tables.equation(1);
    let off0 = eq.off_table(0);
    let mut flags = SolveFlags::default();
    let raw: Vec<f64> = tables
        .grid
        .iter()
        .enumerate()
        .map(|(idx, _)| {
            let tau = eq.sign.cdf.value_at(idx);
            let (qidx, saturated) = if tau <= 0.0 {
                (0, false)
            } else {
                off0.cdf.quantile_index(tau)
            };
            flags.saturated |= saturated;
            tables.grid[qidx]
        })
        .collect();
    let tab = TabulatedSolution {
        grid: tables.grid.clone(),
        raw_images: raw,
        source: tables.treatment_of[1],
        target: tables.treatment_of[0],
    };
    flags.flat |= tab.max_flat_run() > 0.0;
    let (map, _) = tab.to_map()?;
    Ok((map, flags))
}

/// The two images of the closed-form `k = 2` solution at `y_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct K2Solution {
    /// Image on the middle treatment's scale (canonical coordinate 1).
    pub phi_mid: f64,
    /// Image on the reference treatment's scale (canonical coordinate 0).
    pub phi_ref: f64,
    pub flags: SolveFlags,
}

/// Straight-line transcription of the `k = 2` closed form: the nested map
/// from the first pair, the weighted aggregate from the second, and an
/// inf-convention crossing search. Arithmetic is ordered identically to the
/// general recursion so both return the same grid points.
pub fn solve_k2(tables: &SystemTables, y_f: f64) -> Result<K2Solution> {
    if tables.k != 2 {
        return Err(Error::ConfigInvalid(format!(
            "solve_k2 needs k = 2, got {}",
            tables.k
        )));
    }
    let n = tables.grid.len();
    let eq1 = tables.equation(1);
    let eq2 = tables.equation(2);
    let off10 = eq1.off_table(0);
    let off12 = eq1.off_table(2);
    let off20 = eq2.off_table(0);
    let off21 = eq2.off_table(1);

    // Constant absorbed from the fixed coordinate y_f into equation 1.
    let c = off12.cdf.eval(y_f) * off12.probability;
    let target = eq2.sign.cdf.eval(y_f) * eq2.sign.probability;

    // Nested map y -> phi_ref(y) defined by equation 1 at fixed y_f.
    let mut clipped = 0usize;
    let nested = |idx: usize, clipped: &mut usize| -> (usize, bool) {
        let mut arg = (eq1.sign.cdf.value_at(idx) * eq1.sign.probability - c) / off10.probability;
        if !(0.0..=1.0).contains(&arg) {
            *clipped += 1;
            arg = arg.clamp(0.0, 1.0);
        }
        off10.cdf.quantile_index(arg)
    };

    // The nested argument is monotone in the grid index; an empty domain
    // means it misses [0, 1] entirely.
    let arg_at = |idx: usize| (eq1.sign.cdf.value_at(idx) * eq1.sign.probability - c)
        / off10.probability;
    if arg_at(n - 1) < 0.0 || arg_at(0) > 1.0 {
        return Err(Error::DomainEmpty(y_f));
    }

    let mut flags = SolveFlags::default();
    let eval_g = |idx: usize, clipped: &mut usize, flags: &mut SolveFlags| -> f64 {
        let (x0, saturated) = nested(idx, clipped);
        flags.saturated |= saturated;
        off20.cdf.value_at(x0) * off20.probability
            + off21.cdf.value_at(idx) * off21.probability
    };

    // Probes run with scratch accounting; only the returned solution's
    // nested evaluation counts toward the flags.
    let mut scratch_clip = 0usize;
    let mut scratch = SolveFlags::default();
    let mut lo = 0usize;
    let mut hi = n - 1;
    let crossing = if eval_g(hi, &mut scratch_clip, &mut scratch) < target {
        return Err(Error::Saturated(y_f));
    } else if eval_g(lo, &mut scratch_clip, &mut scratch) >= target {
        lo
    } else {
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if eval_g(mid, &mut scratch_clip, &mut scratch) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let (x0, saturated) = nested(crossing, &mut clipped);
    flags.saturated |= saturated;
    flags.clipped = clipped;
    Ok(K2Solution {
        phi_mid: tables.grid[crossing],
        phi_ref: tables.grid[x0],
        flags,
    })
}

/// Grid tabulation of one solved coordinate, before monotonicity repair.
struct TabulatedSolution {
    grid: Vec<f64>,
    raw_images: Vec<f64>,
    source: usize,
    target: usize,
}

impl TabulatedSolution {
    /// Strictly increasing forward map. Raw decreases (possible only on noisy
    /// estimated tables) are repaired by a running maximum and counted; flat
    /// runs from the inf convention are separated by a negligible ramp so the
    /// map stays invertible.
    fn to_map(&self) -> Result<(CounterfactualMap, usize)> {
        let span = self.grid.last().unwrap() - self.grid[0];
        let eps = span * 1e-12;
        let mut repaired = 0usize;
        let mut images = Vec::with_capacity(self.raw_images.len());
        let mut running = f64::NEG_INFINITY;
        for &raw in &self.raw_images {
            if raw < running - eps {
                repaired += 1;
            }
            running = running.max(raw);
            let next = match images.last() {
                Some(&prev) if running <= prev => prev + eps,
                _ => running,
            };
            images.push(next);
        }
        let map = CounterfactualMap::new(self.source, self.target, self.grid.clone(), images)?;
        Ok((map, repaired))
    }

    /// Inverse map built from the unique raw image levels: the inf-convention
    /// preimage of each level, strictly increasing by construction.
    fn inverse_map(&self) -> Result<CounterfactualMap> {
        let mut grid = Vec::new();
        let mut images = Vec::new();
        for (i, &img) in self.raw_images.iter().enumerate() {
            if grid.last().map(|&g| img > g).unwrap_or(true) {
                grid.push(img);
                images.push(self.grid[i]);
            }
        }
        if grid.len() < 2 {
            return Err(Error::NotStrictlyIncreasing(0));
        }
        CounterfactualMap::new(self.target, self.source, grid, images)
    }

    /// Widest flat run of raw images, in outcome units of the source grid.
    fn max_flat_run(&self) -> f64 {
        let mut widest = 0.0f64;
        let mut start = 0usize;
        for i in 1..self.raw_images.len() {
            if self.raw_images[i] > self.raw_images[start] {
                widest = widest.max(self.grid[i - 1] - self.grid[start]);
                start = i;
            }
        }
        widest.max(self.grid[self.raw_images.len() - 1] - self.grid[start])
    }
}

/// Tabulation diagnostics for a full family build.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct BuildFlags {
    pub saturated_nodes: usize,
    pub flat_nodes: usize,
    pub clipped_evaluations: usize,
    pub repaired_decreases: usize,
    /// Widest set-valued (flat) run across the solved coordinates.
    pub max_flat_width: f64,
}

/// All counterfactual mappings between ordered treatment pairs.
#[derive(Debug, Clone)]
pub struct MapFamily {
    pub k: usize,
    grid: Vec<f64>,
    maps: Vec<Vec<CounterfactualMap>>,
    pub flags: BuildFlags,
    /// Per-node solver flags on the shared grid (tabulation quality).
    pub node_flags: Vec<SolveFlags>,
}

impl MapFamily {
    pub fn get(&self, s: usize, t: usize) -> &CounterfactualMap {
        &self.maps[s][t]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Clamped evaluation of `phi_{s,t}`.
    pub fn eval(&self, s: usize, t: usize, y: f64) -> (f64, bool) {
        self.maps[s][t].eval_clamped(y)
    }

    /// Nodes where the solver produced clean (unsaturated, unclipped) images.
    pub fn clean_node_range(&self) -> Option<(usize, usize)> {
        let first = self.node_flags.iter().position(SolveFlags::clean)?;
        let last = self.node_flags.iter().rposition(SolveFlags::clean)?;
        Some((first, last))
    }
}

/// Solve at every grid node of the tables and assemble every `phi_{s,t}`.
pub fn build_all_maps(tables: &SystemTables) -> Result<MapFamily> {
    let reporting = tables.grid.clone();
    build_maps_on_grid(tables, &reporting)
}

/// Solve at each reporting node and assemble every `phi_{s,t}` by
/// tabulation, inversion, and composition through the reference source
/// treatment.
///
/// The tables may sit on a finer grid than the reporting nodes; solving on
/// an oversampled grid keeps the compounded inf-convention rounding of the
/// nested crossings below one reporting step.
pub fn build_maps_on_grid(tables: &SystemTables, reporting: &[f64]) -> Result<MapFamily> {
    let k = tables.k;
    let n = reporting.len();
    if n < 2 {
        return Err(Error::EmptySample);
    }
    let source = tables.reference_source();

    let mut raw = vec![Vec::with_capacity(n); k];
    let mut node_flags = Vec::with_capacity(n);
    let mut flags = BuildFlags::default();
    if k == 1 {
        let eq = tables.equation(1);
        let off0 = eq.off_table(0);
        for &y in reporting {
            let mut node = SolveFlags::default();
            let tau = eq.sign.cdf.eval(y);
            let qidx = if tau <= 0.0 {
                0
            } else {
                let (qidx, saturated) = off0.cdf.quantile_index(tau);
                node.saturated = saturated;
                qidx
            };
            raw[0].push(tables.grid[qidx]);
            node_flags.push(node);
        }
    } else {
        for &y in reporting {
            let (indices, node) = solve_images(tables, TopEval::Value(y))?;
            for (j, &x) in indices.iter().enumerate() {
                raw[j].push(tables.grid[x]);
            }
            node_flags.push(node);
        }
    }
    for node in &node_flags {
        flags.saturated_nodes += node.saturated as usize;
        flags.flat_nodes += node.flat as usize;
        flags.clipped_evaluations += node.clipped;
    }

    // Forward and inverse legs through the reference source treatment.
    let mut forward: Vec<Option<CounterfactualMap>> = vec![None; k + 1];
    let mut inverse: Vec<Option<CounterfactualMap>> = vec![None; k + 1];
    for (canon, images) in raw.into_iter().enumerate() {
        let target = tables.treatment_of()[canon];
        let tab = TabulatedSolution {
            grid: reporting.to_vec(),
            raw_images: images,
            source,
            target,
        };
        flags.max_flat_width = flags.max_flat_width.max(tab.max_flat_run());
        let (map, repaired) = tab.to_map()?;
        flags.repaired_decreases += repaired;
        inverse[target] = Some(tab.inverse_map()?);
        forward[target] = Some(map);
    }

    let mut maps: Vec<Vec<CounterfactualMap>> = Vec::with_capacity(k + 1);
    for s in 0..=k {
        let mut row = Vec::with_capacity(k + 1);
        for t in 0..=k {
            let map = if s == t {
                CounterfactualMap::identity(s, reporting.to_vec())?
            } else if s == source {
                forward[t].clone().expect("forward leg built")
            } else if t == source {
                inverse[s].clone().expect("inverse leg built")
            } else {
                let a = inverse[s].as_ref().expect("inverse leg built");
                let b = forward[t].as_ref().expect("forward leg built");
                compose_maps(a, b)?
            };
            row.push(map);
        }
        maps.push(row);
    }

    Ok(MapFamily {
        k,
        grid: reporting.to_vec(),
        maps,
        flags,
        node_flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdf::{grid, SupportWindow};
    use crate::dgp::{self, AnalyticCells, OutcomeDistribution};
    use crate::oracle::analytic_phi;

    fn analytic_tables(k: usize, nodes: usize, window: (f64, f64)) -> (SystemTables, dgp::PresetDesign) {
        let mut design = dgp::example_i(k, 1).unwrap();
        design.config.utility.endogeneity = vec![0.0; k + 1];
        let analytic = AnalyticCells::new(&design.config);
        let w = SupportWindow::new(window.0, window.1, 0.0).unwrap();
        let g = grid::uniform(&w, nodes);
        let tables =
            SystemTables::from_analytic(&analytic, &design.monotonicity, &g, 0.01).unwrap();
        (tables, design)
    }

    /// Tables oversampled fourfold relative to the reporting grid, the
    /// configuration the map builder is meant to run with.
    fn oversampled(
        k: usize,
        nodes: usize,
        window: (f64, f64),
    ) -> (SystemTables, Vec<f64>, dgp::PresetDesign) {
        let (tables, design) = analytic_tables(k, (nodes - 1) * 4 + 1, window);
        let w = SupportWindow::new(window.0, window.1, 0.0).unwrap();
        let reporting = grid::uniform(&w, nodes);
        (tables, reporting, design)
    }

    fn identical_tables(k: usize) -> SystemTables {
        let mut design = dgp::example_i(k, 1).unwrap();
        design.config.utility.endogeneity = vec![0.0; k + 1];
        design.config.outcomes = vec![OutcomeDistribution::Gaussian { mean: 0.0, sd: 1.0 }; k + 1];
        let analytic = AnalyticCells::new(&design.config);
        let w = SupportWindow::new(-4.0, 4.0, 0.0).unwrap();
        let g = grid::uniform(&w, 257);
        SystemTables::from_analytic(&analytic, &design.monotonicity, &g, 0.01).unwrap()
    }

    #[test]
    fn mass_balance_is_arithmetic_identity() {
        let (tables, _) = analytic_tables(2, 128, (-4.0, 6.0));
        for r in tables.balance_residuals() {
            assert!(r.abs() < 1e-9, "balance residual {r}");
        }
    }

    #[test]
    fn identity_solution_for_identical_arms() {
        let tables = identical_tables(2);
        for y_f in [-1.5, -0.25, 0.0, 0.8, 2.1] {
            let sol = solve_general(&tables, y_f, SolveOptions::default()).unwrap();
            let step = grid::max_step(tables.grid());
            for &img in &sol.images {
                assert!(
                    (img - y_f).abs() <= 2.0 * step + 1e-12,
                    "y_f = {y_f}, image {img}"
                );
            }
        }
    }

    #[test]
    fn gaussian_shift_closed_form_k2() {
        let (tables, _) = analytic_tables(2, 512, (-4.0, 6.0));
        let step = grid::max_step(tables.grid());
        // The nested coordinate passes through two inf-convention roundings.
        for y_f in [-0.5, 0.5, 1.5, 2.5, 3.5] {
            let sol = solve_k2(&tables, y_f).unwrap();
            assert!(
                (sol.phi_mid - (y_f - 1.0)).abs() <= step,
                "phi_mid at {y_f}: {}",
                sol.phi_mid
            );
            assert!(
                (sol.phi_ref - (y_f - 2.0)).abs() <= 2.0 * step,
                "phi_ref at {y_f}: {}",
                sol.phi_ref
            );
        }
    }

    #[test]
    fn general_solver_agrees_with_k2_exactly() {
        let (tables, _) = analytic_tables(2, 256, (-4.0, 6.0));
        for y_f in [-0.4, 0.3, 1.1, 2.6, 3.9] {
            let k2 = solve_k2(&tables, y_f).unwrap();
            let gen = solve_general(&tables, y_f, SolveOptions::default()).unwrap();
            assert_eq!(gen.images[1], k2.phi_mid, "y_f = {y_f}");
            assert_eq!(gen.images[0], k2.phi_ref, "y_f = {y_f}");
        }
    }

    #[test]
    fn gaussian_shift_k3() {
        let (tables, _) = analytic_tables(3, 512, (-4.0, 7.0));
        let step = grid::max_step(tables.grid());
        for y_f in [0.0, 1.0, 2.0, 3.0, 4.5] {
            let sol = solve_general(&tables, y_f, SolveOptions::default()).unwrap();
            for (canon, &img) in sol.images.iter().enumerate() {
                let t = tables.treatment_of()[canon] as f64;
                let expected = y_f + t - 3.0;
                // One rounding per nesting level below the top coordinate.
                let depth = (3 - canon) as f64;
                assert!(
                    (img - expected).abs() <= depth * step,
                    "y_f = {y_f}, canon {canon}: {img} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn solution_monotone_in_y_f() {
        let (tables, _) = analytic_tables(2, 256, (-4.0, 6.0));
        let mut last: Option<Vec<f64>> = None;
        for i in 0..20 {
            let y_f = -0.5 + 0.2 * i as f64;
            let sol = solve_general(&tables, y_f, SolveOptions::default()).unwrap();
            if let Some(prev) = &last {
                for (a, b) in prev.iter().zip(&sol.images) {
                    assert!(b >= a, "images decreased moving y_f to {y_f}");
                }
            }
            last = Some(sol.images);
        }
    }

    #[test]
    fn residual_certificate_holds() {
        let (tables, _) = analytic_tables(2, 256, (-4.0, 6.0));
        let sol = solve_general(&tables, 1.0, SolveOptions::default()).unwrap();
        let step_tol = 0.05;
        for r in &sol.residuals {
            assert!(r.abs() < step_tol, "residual {r}");
        }
    }

    #[test]
    fn binary_case_recovers_shift() {
        let (tables, _) = analytic_tables(1, 512, (-4.0, 5.0));
        let (map, _) = solve_binary(&tables).unwrap();
        let step = grid::max_step(tables.grid());
        for (&y, &img) in map.grid().iter().zip(map.images()) {
            if y > -2.5 && y < 4.5 {
                assert!((img - (y - 1.0)).abs() <= step + 1e-9, "y = {y}: {img}");
            }
        }
    }

    #[test]
    fn binary_identical_arms_identity() {
        let tables = identical_tables(1);
        let (map, _) = solve_binary(&tables).unwrap();
        let step = grid::max_step(tables.grid());
        for (&y, &img) in map.grid().iter().zip(map.images()) {
            if y.abs() < 3.0 {
                assert!((img - y).abs() <= step + 1e-9);
            }
        }
    }

    #[test]
    fn binary_flat_region_flagged() {
        // A sign CDF with a genuine flat stretch makes the map constant
        // across the preimage and raises the flat flag.
        let g: Vec<f64> = (0..101).map(|i| i as f64 / 10.0).collect();
        let sign_vals: Vec<f64> = g
            .iter()
            .map(|&y| {
                let v = if y < 4.0 {
                    y / 10.0
                } else if y < 6.0 {
                    0.4
                } else {
                    0.4 + (y - 6.0) * 0.15
                };
                v.min(1.0)
            })
            .collect();
        let off_vals: Vec<f64> = g.iter().map(|&y| (y / 10.0).min(1.0)).collect();
        let mk = |vals: &[f64], t: usize| ComplierTable {
            pair: (0, 1),
            treatment: t,
            direction: crate::compliers::FlowDirection::ZToZPrime,
            probability: 0.5,
            cdf: MonotoneCdf::isotonize(g.clone(), vals).unwrap(),
        };
        let tables = SystemTables {
            k: 1,
            grid: g.clone(),
            treatment_of: vec![0, 1],
            equations: vec![EquationTables {
                sign: mk(&sign_vals, 1),
                off: vec![(0, mk(&off_vals, 0))],
            }],
        };
        let (map, flags) = solve_binary(&tables).unwrap();
        assert!(flags.flat);
        // Constant across the flat preimage, up to the strictifying ramp.
        let at = |y: f64| map.eval_clamped(y).0;
        assert!((at(4.5) - at(5.5)).abs() < 1e-6);
    }

    #[test]
    fn family_matches_analytic_shifts() {
        let (tables, reporting, design) = oversampled(2, 512, (-4.0, 6.0));
        let family = build_maps_on_grid(&tables, &reporting).unwrap();
        let step = grid::max_step(&reporting);
        for s in 0..=2usize {
            for t in 0..=2usize {
                let map = family.get(s, t);
                for (&y, &img) in map.grid().iter().zip(map.images()) {
                    let expected = analytic_phi(&design.config, s, t, y).unwrap();
                    if expected > -3.5 && expected < 5.5 && y > -3.5 && y < 5.5 {
                        assert!(
                            (img - expected).abs() <= step + 1e-9,
                            "phi_{s},{t} at {y}: {img} vs {expected}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn family_round_trip_is_identity() {
        let (tables, reporting, _) = oversampled(2, 256, (-4.0, 6.0));
        let family = build_maps_on_grid(&tables, &reporting).unwrap();
        let step = grid::max_step(&reporting);
        let round = compose_maps(family.get(0, 2), family.get(2, 0)).unwrap();
        for (&y, &img) in round.grid().iter().zip(round.images()) {
            if y > -1.5 && y < 3.5 {
                assert!((img - y).abs() <= step + 1e-9, "round trip at {y}: {img}");
            }
        }
    }

    #[test]
    fn diagonal_maps_are_identity() {
        let (tables, _) = analytic_tables(2, 128, (-4.0, 6.0));
        let family = build_all_maps(&tables).unwrap();
        for t in 0..=2usize {
            let map = family.get(t, t);
            assert_eq!(map.grid(), map.images());
        }
    }
}
