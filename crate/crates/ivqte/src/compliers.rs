//! Identified complier quantities: choice probabilities per instrument cell,
//! complier masses as propensity differences, and complier outcome CDFs as
//! signed differences of cell CDFs, repaired to monotonicity.

use crate::cdf::{Ecdf, MonotoneCdf};
use crate::dgp::{AnalyticCells, Dataset};
use crate::error::{Error, Result};
use serde::Serialize;

/// Default guard against near-zero complier mass in denominators.
pub const DEFAULT_ETA: f64 = 0.01;

/// Choice probabilities `p_t(z)`, rows indexed by instrument value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityMatrix {
    rows: Vec<Vec<f64>>,
}

impl PropensityMatrix {
    /// Validate and wrap externally supplied rows. `tol` bounds the allowed
    /// deviation of each row sum from one (1e-9 for estimates, 1e-12 for
    /// analytic inputs).
    pub fn from_rows(rows: Vec<Vec<f64>>, tol: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySample);
        }
        let width = rows[0].len();
        for row in &rows {
            if row.len() != width {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: width,
                });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > tol || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::ConfigInvalid(format!(
                    "propensity row sums to {total}, outside 1 ± {tol}"
                )));
            }
        }
        Ok(PropensityMatrix { rows })
    }

    pub fn n_instruments(&self) -> usize {
        self.rows.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.rows[0].len()
    }

    pub fn get(&self, z: usize, t: usize) -> f64 {
        self.rows[z][t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Differences `p_t(z1) - p_t(z2)` across treatments for one pair.
    pub fn differences(&self, pair: (usize, usize)) -> Vec<f64> {
        (0..self.n_treatments())
            .map(|t| self.rows[pair.0][t] - self.rows[pair.1][t])
            .collect()
    }
}

/// Per-cell sorted outcome values from a dataset, the basis of every
/// empirical CDF in the pipeline.
#[derive(Debug, Clone)]
pub struct Cells {
    k: usize,
    n_instruments: usize,
    /// `values[z][t]`: sorted outcomes in cell `(t, z)`.
    values: Vec<Vec<Vec<f64>>>,
    z_counts: Vec<usize>,
}

impl Cells {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let k = data.k;
        let m = data.n_instruments();
        let mut values = vec![vec![Vec::new(); k + 1]; m];
        let mut z_counts = vec![0usize; m];
        for obs in &data.records {
            if !obs.y.is_finite() {
                return Err(Error::NonFinite(obs.y));
            }
            if obs.t > k || obs.z >= m {
                return Err(Error::ConfigInvalid(format!(
                    "record outside declared ranges: t = {}, z = {}",
                    obs.t, obs.z
                )));
            }
            values[obs.z][obs.t].push(obs.y);
            z_counts[obs.z] += 1;
        }
        for row in &mut values {
            for cell in row.iter_mut() {
                cell.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
        }
        Ok(Cells {
            k,
            n_instruments: m,
            values,
            z_counts,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn cell_count(&self, t: usize, z: usize) -> usize {
        self.values[z][t].len()
    }

    pub fn z_count(&self, z: usize) -> usize {
        self.z_counts[z]
    }

    pub fn cell_values(&self, t: usize, z: usize) -> &[f64] {
        &self.values[z][t]
    }

    pub fn cell_ecdf(&self, t: usize, z: usize) -> Result<Ecdf> {
        if self.values[z][t].is_empty() {
            return Err(Error::EmptyCell { t, z });
        }
        Ecdf::from_sorted(&self.values[z][t])
    }

    /// Empirical choice probabilities `count(t, z) / count(z)`.
    pub fn propensity_matrix(&self) -> Result<PropensityMatrix> {
        for (z, &count) in self.z_counts.iter().enumerate() {
            if count == 0 {
                return Err(Error::EmptyCell { t: 0, z });
            }
        }
        let rows = (0..self.n_instruments)
            .map(|z| {
                (0..=self.k)
                    .map(|t| self.values[z][t].len() as f64 / self.z_counts[z] as f64)
                    .collect()
            })
            .collect();
        PropensityMatrix::from_rows(rows, 1e-9)
    }
}

/// Evaluate observed-cell outcome CDFs; implemented by empirical cells and by
/// the analytic design.
pub trait OutcomeCdf {
    fn cdf(&self, t: usize, z: usize, y: f64) -> f64;
    fn n_treatments(&self) -> usize;
    fn n_instruments(&self) -> usize;

    /// Whether cell `(t, z)` can be evaluated; analytic designs always can.
    fn has_cell(&self, _t: usize, _z: usize) -> bool {
        true
    }
}

impl OutcomeCdf for Cells {
    fn cdf(&self, t: usize, z: usize, y: f64) -> f64 {
        let cell = &self.values[z][t];
        if cell.is_empty() {
            return 0.0;
        }
        cell.partition_point(|&v| v <= y) as f64 / cell.len() as f64
    }

    fn n_treatments(&self) -> usize {
        self.k + 1
    }

    fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    fn has_cell(&self, t: usize, z: usize) -> bool {
        !self.values[z][t].is_empty()
    }
}

impl OutcomeCdf for AnalyticCells {
    fn cdf(&self, t: usize, z: usize, y: f64) -> f64 {
        self.cell_cdf(t, z, y)
    }

    fn n_treatments(&self) -> usize {
        self.config().k + 1
    }

    fn n_instruments(&self) -> usize {
        self.config().n_instruments()
    }
}

/// Which way a complier table reads its pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FlowDirection {
    /// Units pushed into the treatment moving `z -> z'`.
    ZToZPrime,
    /// Units pushed into the treatment moving `z' -> z`.
    ZPrimeToZ,
}

/// Identified mass and outcome CDF of one complier group `C^t_{z, z'}`.
#[derive(Debug, Clone)]
pub struct ComplierTable {
    pub pair: (usize, usize),
    pub treatment: usize,
    pub direction: FlowDirection,
    pub probability: f64,
    pub cdf: MonotoneCdf,
}

/// Complier mass `p_t(z') - p_t(z)`, guarded against weak pairs.
pub fn complier_probability(
    p: &PropensityMatrix,
    pair: (usize, usize),
    t: usize,
    eta: f64,
) -> Result<f64> {
    let (z, z_prime) = pair;
    let delta = p.get(z_prime, t) - p.get(z, t);
    if delta <= eta {
        return Err(Error::WeakPair {
            z,
            z_prime,
            t,
            delta,
            eta,
        });
    }
    Ok(delta)
}

/// Raw signed-difference values of the complier CDF on a grid, then the
/// running-maximum repair. The difference, not the cell CDFs, is what can
/// lose monotonicity in finite samples.
pub fn complier_cdf(
    cells: &impl OutcomeCdf,
    p: &PropensityMatrix,
    pair: (usize, usize),
    t: usize,
    grid: &[f64],
    eta: f64,
) -> Result<ComplierTable> {
    let probability = complier_probability(p, pair, t, eta)?;
    let (z, z_prime) = pair;
    let p_hi = p.get(z_prime, t);
    let p_lo = p.get(z, t);
    let raw: Vec<f64> = grid
        .iter()
        .map(|&y| {
            let hi_term = cells.cdf(t, z_prime, y) * p_hi;
            // With p_t(z) = 0 the subtracted cell is empty by construction
            // and contributes nothing.
            let lo_term = if p_lo == 0.0 {
                0.0
            } else {
                cells.cdf(t, z, y) * p_lo
            };
            (hi_term - lo_term) / probability
        })
        .collect();
    let cdf = MonotoneCdf::isotonize(grid.to_vec(), &raw)?;
    Ok(ComplierTable {
        pair,
        treatment: t,
        direction: FlowDirection::ZToZPrime,
        probability,
        cdf,
    })
}
