//! Step-function distribution machinery: empirical CDFs, tabulated monotone
//! CDFs with generalized-inverse quantiles, monotonicity repair, and support
//! trimming.
//!
//! Conventions used throughout the crate:
//! * CDFs are right-continuous step functions between grid nodes.
//! * Quantiles use the inf convention: `Q(tau) = inf{y : F(y) >= tau}`.
//! * Monotonicity repair is a running maximum clipped to `[0, 1]`, which
//!   preserves inf-quantiles and is `O(n)`.

use crate::error::{Error, Result};

/// Empirical CDF with ties merged into single support points.
///
/// `values[i]` is the probability mass at or below `points[i]`; the last
/// value is exactly 1 for a nonempty sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    points: Vec<f64>,
    values: Vec<f64>,
    n: usize,
}

impl Ecdf {
    /// Build from raw samples. Ties are merged; mass is `1/n` per observation.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(&bad) = samples.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mut points = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for &y in &sorted {
            match points.last() {
                Some(&last) if last == y => *counts.last_mut().unwrap() += 1,
                _ => {
                    points.push(y);
                    counts.push(1);
                }
            }
        }
        let mut acc = 0usize;
        let values = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / n as f64
            })
            .collect();
        Ok(Ecdf { points, values, n })
    }

    /// Build directly from pre-sorted samples (no copy of the caller's data).
    pub fn from_sorted(sorted: &[f64]) -> Result<Self> {
        debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        Self::from_samples(sorted)
    }

    /// Right-continuous evaluation: fraction of the sample `<= y`.
    pub fn eval(&self, y: f64) -> f64 {
        let idx = self.points.partition_point(|&p| p <= y);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Inf-convention quantile: smallest support point with `F >= tau`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::TauOutOfRange(tau));
        }
        let idx = self.values.partition_point(|&v| v < tau);
        Ok(self.points[idx.min(self.points.len() - 1)])
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    pub fn support_points(&self) -> &[f64] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Tabulate onto an evaluation grid as a [`MonotoneCdf`].
    pub fn on_grid(&self, grid: &[f64]) -> MonotoneCdf {
        let values = grid.iter().map(|&y| self.eval(y)).collect();
        MonotoneCdf::new_unchecked(grid.to_vec(), values)
    }
}

/// Convenience wrapper matching the canonical construction of an ECDF.
pub fn build_ecdf(samples: &[f64]) -> Result<Ecdf> {
    Ecdf::from_samples(samples)
}

/// Tabulated nondecreasing CDF on a fixed grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCdf {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl MonotoneCdf {
    /// Construct after validating monotonicity and range.
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        if grid.is_empty() {
            return Err(Error::EmptySample);
        }
        for w in values.windows(2) {
            if w[1] < w[0] {
                return Err(Error::NotStrictlyIncreasing(0));
            }
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::ConfigInvalid("cdf values outside [0,1]".into()));
        }
        Ok(MonotoneCdf { grid, values })
    }

    pub(crate) fn new_unchecked(grid: Vec<f64>, values: Vec<f64>) -> Self {
        MonotoneCdf { grid, values }
    }

    /// Running-maximum repair of raw plug-in values, clipped to `[0, 1]`.
    ///
    /// The signed-difference plug-in of a complier CDF need not be monotone in
    /// finite samples; this restores a valid CDF without moving inf-quantiles.
    pub fn isotonize(grid: Vec<f64>, raw: &[f64]) -> Result<Self> {
        if grid.len() != raw.len() {
            return Err(Error::LengthMismatch {
                left: grid.len(),
                right: raw.len(),
            });
        }
        let mut running = f64::NEG_INFINITY;
        let values = raw
            .iter()
            .map(|&v| {
                running = running.max(v);
                running.clamp(0.0, 1.0)
            })
            .collect();
        Ok(MonotoneCdf { grid, values })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Right-continuous step evaluation.
    pub fn eval(&self, y: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g <= y);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn value_at(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Index of the inf-convention quantile: first grid index with `F >= tau`.
    /// Saturates at the last index when `tau` is never reached.
    pub fn quantile_index(&self, tau: f64) -> (usize, bool) {
        let idx = self.values.partition_point(|&v| v < tau);
        if idx >= self.values.len() {
            (self.values.len() - 1, true)
        } else {
            (idx, false)
        }
    }

    /// Inf-convention quantile. Returns the largest grid point (flagged via
    /// [`MonotoneCdf::quantile_flagged`]) when the CDF never reaches `tau`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        self.quantile_flagged(tau).map(|(y, _)| y)
    }

    /// Same as [`MonotoneCdf::quantile`] but reports saturation.
    pub fn quantile_flagged(&self, tau: f64) -> Result<(f64, bool)> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::TauOutOfRange(tau));
        }
        let (idx, saturated) = self.quantile_index(tau);
        Ok((self.grid[idx], saturated))
    }

    /// Width of the widest flat interval strictly inside (0, 1) of the CDF.
    /// Flat regions are where the generalized inverse is set-valued.
    pub fn max_flat_width(&self) -> f64 {
        let mut widest = 0.0f64;
        let mut run_start = 0usize;
        for i in 1..self.values.len() {
            if self.values[i] > self.values[run_start] {
                if self.values[run_start] > 0.0 && self.values[run_start] < 1.0 {
                    widest = widest.max(self.grid[i - 1] - self.grid[run_start]);
                }
                run_start = i;
            }
        }
        widest
    }
}

/// Interior evaluation window standing in for the identified inner support.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SupportWindow {
    pub lower: f64,
    pub upper: f64,
    pub trim_fraction: f64,
}

impl SupportWindow {
    pub fn new(lower: f64, upper: f64, trim_fraction: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::DegenerateSupport { lower, upper });
        }
        if !(0.0..0.5).contains(&trim_fraction) {
            return Err(Error::ConfigInvalid(format!(
                "trim fraction {trim_fraction} outside [0, 0.5)"
            )));
        }
        Ok(SupportWindow {
            lower,
            upper,
            trim_fraction,
        })
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lower && y <= self.upper
    }

    pub fn span(&self) -> f64 {
        self.upper - self.lower
    }

    /// Intersection of two windows; errors when they do not overlap.
    pub fn intersect(&self, other: &SupportWindow) -> Result<SupportWindow> {
        SupportWindow::new(
            self.lower.max(other.lower),
            self.upper.min(other.upper),
            self.trim_fraction.max(other.trim_fraction),
        )
    }
}

/// Empirical trimming window `[Q(f), Q(1 - f)]` with inf-convention quantiles.
/// `trim_fraction = 0` keeps the full observed range.
pub fn trim_support(samples: &[f64], trim_fraction: f64) -> Result<SupportWindow> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::ConfigInvalid(format!(
            "trim fraction {trim_fraction} outside [0, 0.5)"
        )));
    }
    let ecdf = Ecdf::from_samples(samples)?;
    let (lower, upper) = if trim_fraction == 0.0 {
        (ecdf.min(), ecdf.max())
    } else {
        (
            ecdf.quantile(trim_fraction)?,
            ecdf.quantile(1.0 - trim_fraction)?,
        )
    };
    SupportWindow::new(lower, upper, trim_fraction)
}

/// Evaluation grid builders.
///
/// The default estimation grid is the set of observed outcome values inside
/// the window; the uniform refinement is used for tabulating maps and curves.
pub mod grid {
    use super::SupportWindow;

    /// Default number of nodes for the uniform refinement.
    pub const DEFAULT_NODES: usize = 512;

    /// Uniform grid of `nodes` points spanning the window inclusively.
    pub fn uniform(window: &SupportWindow, nodes: usize) -> Vec<f64> {
        assert!(nodes >= 2, "grid needs at least two nodes");
        let step = window.span() / (nodes - 1) as f64;
        (0..nodes).map(|i| window.lower + step * i as f64).collect()
    }

    /// Sorted unique observed values inside the window.
    pub fn observed(samples: &[f64], window: &SupportWindow) -> Vec<f64> {
        let mut pts: Vec<f64> = samples
            .iter()
            .copied()
            .filter(|&y| window.contains(y))
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        pts
    }

    /// Largest spacing between adjacent nodes; the natural resolution limit
    /// of any grid-valued solution.
    pub fn max_step(grid: &[f64]) -> f64 {
        grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_definition() {
        let f = build_ecdf(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.eval(2.0), 2.0 / 3.0);
        assert_eq!(f.eval(0.5), 0.0);
        assert_eq!(f.eval(3.0), 1.0);
    }

    #[test]
    fn ecdf_single_point_mass() {
        let f = build_ecdf(&[5.0]).unwrap();
        assert_eq!(f.eval(5.0), 1.0);
        assert_eq!(f.eval(4.9), 0.0);
    }

    #[test]
    fn ecdf_merges_ties() {
        let f = build_ecdf(&[2.0, 2.0, 4.0]).unwrap();
        assert_eq!(f.eval(2.0), 2.0 / 3.0);
        assert_eq!(f.support_points(), &[2.0, 4.0]);
    }

    #[test]
    fn ecdf_rejects_empty_and_nonfinite() {
        assert!(matches!(build_ecdf(&[]), Err(Error::EmptySample)));
        assert!(matches!(
            build_ecdf(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn generalized_inverse_inf_convention() {
        let f = build_ecdf(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.quantile(0.5).unwrap(), 2.0);
        assert_eq!(f.quantile(2.0 / 3.0).unwrap(), 2.0);

        let flat = MonotoneCdf::new(vec![0.0, 1.0, 2.0], vec![0.2, 0.2, 0.9]).unwrap();
        assert_eq!(flat.quantile(0.2).unwrap(), 0.0);
    }

    #[test]
    fn quantile_rejects_out_of_range_tau() {
        let f = build_ecdf(&[1.0, 2.0]).unwrap();
        assert!(matches!(f.quantile(0.0), Err(Error::TauOutOfRange(_))));
        assert!(matches!(f.quantile(1.0), Err(Error::TauOutOfRange(_))));
    }

    #[test]
    fn quantile_saturation_flagged() {
        let f = MonotoneCdf::new(vec![0.0, 1.0], vec![0.1, 0.4]).unwrap();
        let (y, saturated) = f.quantile_flagged(0.9).unwrap();
        assert_eq!(y, 1.0);
        assert!(saturated);
    }

    #[test]
    fn isotonize_running_max_and_clip() {
        let g = vec![0.0, 1.0, 2.0];
        let f = MonotoneCdf::isotonize(g.clone(), &[0.1, 0.05, 0.3]).unwrap();
        assert_eq!(f.values(), &[0.1, 0.1, 0.3]);

        let f = MonotoneCdf::isotonize(g.clone(), &[-0.02, 0.5, 1.03]).unwrap();
        assert_eq!(f.values(), &[0.0, 0.5, 1.0]);

        let f = MonotoneCdf::isotonize(g, &[0.2, 0.4, 0.9]).unwrap();
        assert_eq!(f.values(), &[0.2, 0.4, 0.9]);
    }

    #[test]
    fn isotonize_rejects_length_mismatch() {
        assert!(matches!(
            MonotoneCdf::isotonize(vec![0.0], &[0.1, 0.2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn trim_window_order_statistics() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let w = trim_support(&samples, 0.01).unwrap();
        assert_eq!(w.lower, 1.0);
        assert_eq!(w.upper, 99.0);

        let w = trim_support(&samples, 0.0).unwrap();
        assert_eq!((w.lower, w.upper), (1.0, 100.0));
    }

    #[test]
    fn trim_degenerate_support_errors() {
        let samples = vec![3.0; 10];
        assert!(matches!(
            trim_support(&samples, 0.0),
            Err(Error::DegenerateSupport { .. })
        ));
    }

    #[test]
    fn flat_width_reporting() {
        let f =
            MonotoneCdf::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.1, 0.5, 0.5, 0.9]).unwrap();
        assert_eq!(f.max_flat_width(), 1.0);
    }

    #[test]
    fn uniform_grid_spans_window() {
        let w = SupportWindow::new(-1.0, 1.0, 0.0).unwrap();
        let g = grid::uniform(&w, 5);
        assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!((grid::max_step(&g) - 0.5).abs() < 1e-15);
    }
}
