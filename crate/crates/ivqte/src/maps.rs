//! Tabulated counterfactual mappings between potential-outcome scales.
//!
//! A map carries outcome values from the source treatment's distribution to
//! the target treatment's distribution at the same quantile. Between grid
//! nodes the tabulated map is evaluated by linear interpolation, which keeps
//! it strictly increasing and therefore invertible.

use crate::error::{Error, Result};

/// Strictly increasing tabulated map `y -> phi(y)` from the outcome scale of
/// `source_treatment` to that of `target_treatment`.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualMap {
    pub source_treatment: usize,
    pub target_treatment: usize,
    grid: Vec<f64>,
    images: Vec<f64>,
}

impl CounterfactualMap {
    /// Construct after checking strict monotonicity of grid and images.
    pub fn new(
        source_treatment: usize,
        target_treatment: usize,
        grid: Vec<f64>,
        images: Vec<f64>,
    ) -> Result<Self> {
        if grid.len() != images.len() {
            return Err(Error::LengthMismatch {
                left: grid.len(),
                right: images.len(),
            });
        }
        if grid.len() < 2 {
            return Err(Error::EmptySample);
        }
        for (i, w) in grid.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::NotStrictlyIncreasing(i));
            }
        }
        for (i, w) in images.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::NotStrictlyIncreasing(i));
            }
        }
        Ok(CounterfactualMap {
            source_treatment,
            target_treatment,
            grid,
            images,
        })
    }

    /// The identity map for treatment `t` on the given grid.
    pub fn identity(t: usize, grid: Vec<f64>) -> Result<Self> {
        let images = grid.clone();
        Self::new(t, t, grid, images)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Piecewise-linear evaluation; errors when `y` leaves the grid span.
    pub fn eval(&self, y: f64) -> Result<f64> {
        let lo = self.grid[0];
        let hi = *self.grid.last().unwrap();
        if y < lo || y > hi {
            return Err(Error::RangeEscape(y));
        }
        Ok(self.interp(y))
    }

    /// Piecewise-linear evaluation clamped to the endpoint images; reports
    /// whether clamping occurred so callers can count out-of-window hits.
    pub fn eval_clamped(&self, y: f64) -> (f64, bool) {
        let lo = self.grid[0];
        let hi = *self.grid.last().unwrap();
        if y < lo {
            (self.images[0], true)
        } else if y > hi {
            (*self.images.last().unwrap(), true)
        } else {
            (self.interp(y), false)
        }
    }

    fn interp(&self, y: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g <= y);
        if idx == 0 {
            return self.images[0];
        }
        if idx >= self.grid.len() {
            return *self.images.last().unwrap();
        }
        let (x0, x1) = (self.grid[idx - 1], self.grid[idx]);
        let (f0, f1) = (self.images[idx - 1], self.images[idx]);
        f0 + (y - x0) / (x1 - x0) * (f1 - f0)
    }

    /// Span of the image values.
    pub fn image_span(&self) -> (f64, f64) {
        (self.images[0], *self.images.last().unwrap())
    }
}

/// Compose `a: s -> t` with `b: t -> r` into `s -> r`, tabulated on `a`'s grid.
///
/// Requires `a`'s image to stay inside `b`'s grid span so interpolation never
/// extrapolates.
pub fn compose_maps(a: &CounterfactualMap, b: &CounterfactualMap) -> Result<CounterfactualMap> {
    if a.target_treatment != b.source_treatment {
        return Err(Error::TreatmentMismatch {
            a_target: a.target_treatment,
            b_source: b.source_treatment,
        });
    }
    let (b_lo, b_hi) = (b.grid[0], *b.grid.last().unwrap());
    let mut images = Vec::with_capacity(a.len());
    for &img in &a.images {
        if img < b_lo || img > b_hi {
            return Err(Error::RangeEscape(img));
        }
        images.push(b.interp(img));
    }
    CounterfactualMap::new(a.source_treatment, b.target_treatment, a.grid.clone(), images)
}

/// Invert a strictly increasing map by swapping grid and images.
pub fn invert_map(a: &CounterfactualMap) -> Result<CounterfactualMap> {
    CounterfactualMap::new(
        a.target_treatment,
        a.source_treatment,
        a.images.clone(),
        a.grid.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shift_map(s: usize, t: usize, lo: f64, hi: f64, n: usize, delta: f64) -> CounterfactualMap {
        let step = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        let images = grid.iter().map(|&y| y + delta).collect();
        CounterfactualMap::new(s, t, grid, images).unwrap()
    }

    #[test]
    fn shift_composition() {
        let a = shift_map(0, 1, 0.0, 1.0, 11, 1.0);
        let b = shift_map(1, 2, 1.0, 2.0, 11, 1.0);
        let c = compose_maps(&a, &b).unwrap();
        assert_eq!(c.source_treatment, 0);
        assert_eq!(c.target_treatment, 2);
        for (&y, &img) in c.grid().iter().zip(c.images()) {
            assert!((img - (y + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_laws() {
        let b = shift_map(1, 2, 0.0, 1.0, 11, 0.25);
        let id = CounterfactualMap::identity(1, b.grid().to_vec()).unwrap();
        let c = compose_maps(&id, &b).unwrap();
        assert_eq!(c.images(), b.images());

        // a composed with the identity on its image span is a itself.
        let id_after =
            CounterfactualMap::identity(2, vec![0.25, 0.5, 0.75, 1.0, 1.25]).unwrap();
        let c2 = compose_maps(&b, &id_after).unwrap();
        for (&x, &y) in c2.images().iter().zip(b.images()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn analytic_composition_on_nodes() {
        // a: y -> 2y on [0,1]; b: y -> y^2 on [0,2]; composition is 4y^2 at nodes.
        let grid_a: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let images_a = grid_a.iter().map(|&y| 2.0 * y).collect();
        let a = CounterfactualMap::new(0, 1, grid_a.clone(), images_a).unwrap();
        let grid_b: Vec<f64> = (0..=400).map(|i| i as f64 / 200.0).collect();
        let images_b = grid_b
            .iter()
            .map(|&y| if y == 0.0 { -1e-12 } else { y * y })
            .collect();
        let b = CounterfactualMap::new(1, 2, grid_b, images_b).unwrap();
        let c = compose_maps(&a, &b).unwrap();
        for (&y, &img) in c.grid().iter().zip(c.images()) {
            assert!((img - 4.0 * y * y).abs() < 1e-4, "y={y} img={img}");
        }
    }

    #[test]
    fn inversion_round_trip() {
        let a = shift_map(1, 0, 0.0, 1.0, 21, -1.0);
        let inv = invert_map(&a).unwrap();
        assert_eq!(inv.source_treatment, 0);
        assert_eq!(inv.target_treatment, 1);
        for (&y, &img) in inv.grid().iter().zip(inv.images()) {
            assert!((img - (y + 1.0)).abs() < 1e-12);
        }
        let round = compose_maps(&a, &inv).unwrap();
        for (&y, &img) in round.grid().iter().zip(round.images()) {
            assert!((img - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_root_inverse_at_nodes() {
        let grid: Vec<f64> = (0..201).map(|i| -1.0 + i as f64 / 100.0).collect();
        let images: Vec<f64> = grid.iter().map(|&y| y * y * y).collect();
        let a = CounterfactualMap::new(0, 1, grid, images).unwrap();
        let inv = invert_map(&a).unwrap();
        for (&y, &img) in inv.grid().iter().zip(inv.images()) {
            assert!((img - y.cbrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_treatments_reject() {
        let a = shift_map(0, 1, 0.0, 1.0, 5, 0.0);
        let b = shift_map(2, 3, 0.0, 1.0, 5, 0.0);
        assert!(matches!(
            compose_maps(&a, &b),
            Err(Error::TreatmentMismatch { .. })
        ));
    }

    #[test]
    fn range_escape_rejected() {
        let a = shift_map(0, 1, 0.0, 1.0, 5, 5.0);
        let b = shift_map(1, 2, 0.0, 1.0, 5, 0.0);
        assert!(matches!(compose_maps(&a, &b), Err(Error::RangeEscape(_))));
    }

    #[test]
    fn non_monotone_images_reject() {
        assert!(matches!(
            CounterfactualMap::new(0, 1, vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 0.5]),
            Err(Error::NotStrictlyIncreasing(_))
        ));
    }

    #[test]
    fn clamped_eval_counts() {
        let a = shift_map(0, 1, 0.0, 1.0, 5, 1.0);
        let (v, clamped) = a.eval_clamped(-0.5);
        assert_eq!(v, 1.0);
        assert!(clamped);
        let (v, clamped) = a.eval_clamped(0.5);
        assert!((v - 1.5).abs() < 1e-12);
        assert!(!clamped);
    }
}
