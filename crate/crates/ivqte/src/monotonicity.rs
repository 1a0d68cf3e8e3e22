//! Monotonicity structure of instrument pairs: per-treatment inequality
//! directions, sign treatments, and the selected pair subset used for
//! identification.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Direction of the potential-treatment inequality for one `(pair, treatment)`
/// entry. For a pair `(z1, z2)`, `Leq` means `D^t_{z1} <= D^t_{z2}` holds for
/// every unit, `Geq` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Leq,
    Geq,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Leq => Direction::Geq,
            Direction::Geq => Direction::Leq,
        }
    }
}

/// Declared monotonicity of a single instrument pair.
///
/// `directions[t] = None` records that no inequality is asserted for
/// treatment `t` on this pair (a blank cell in the pair's inequality table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMonotonicity {
    /// Instrument value indices `(z1, z2)`.
    pub pair: (usize, usize),
    /// Per-treatment direction, indexed by treatment `0..=k`.
    pub directions: Vec<Option<Direction>>,
    /// The unique treatment whose direction opposes all others, when one exists.
    pub sign_treatment: Option<usize>,
}

impl PairMonotonicity {
    /// A fully specified row: `Geq` at the sign treatment, `Leq` elsewhere.
    pub fn with_sign(pair: (usize, usize), k: usize, sign: usize) -> Self {
        let directions = (0..=k)
            .map(|t| {
                Some(if t == sign {
                    Direction::Geq
                } else {
                    Direction::Leq
                })
            })
            .collect();
        PairMonotonicity {
            pair,
            directions,
            sign_treatment: Some(sign),
        }
    }

    /// Orient the pair as `(z_plus, z_minus)` so that the sign treatment
    /// satisfies `D^s_{z_plus} >= D^s_{z_minus}`.
    pub fn oriented(&self) -> Result<(usize, usize)> {
        let sign = self.sign_treatment.ok_or(Error::SignTreatmentMismatch {
            found: None,
            required: usize::MAX,
        })?;
        match self.directions.get(sign).copied().flatten() {
            Some(Direction::Geq) => Ok((self.pair.0, self.pair.1)),
            Some(Direction::Leq) => Ok((self.pair.1, self.pair.0)),
            None => Err(Error::ConfigInvalid(format!(
                "pair ({}, {}) has no direction at its sign treatment {sign}",
                self.pair.0, self.pair.1
            ))),
        }
    }
}

/// The subset of instrument pairs with declared monotonicity inequalities,
/// plus the `k` selected pairs whose sign treatments are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySpec {
    /// Number of non-zero treatment levels; treatments run over `0..=k`.
    pub k: usize,
    pub pairs: Vec<PairMonotonicity>,
    /// Indices into `pairs` selecting the identification subset.
    pub lambda_star: Vec<usize>,
}

impl MonotonicitySpec {
    pub fn new(k: usize, pairs: Vec<PairMonotonicity>, lambda_star: Vec<usize>) -> Result<Self> {
        let spec = MonotonicitySpec {
            k,
            pairs,
            lambda_star,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Check the structural requirements: `k` selected pairs with pairwise
    /// distinct sign treatments, and every declared pair mixing at least one
    /// `Geq` with one `Leq` (an all-one-direction pair has no compliers).
    pub fn validate(&self) -> Result<()> {
        if self.lambda_star.len() != self.k {
            return Err(Error::AssumptionViolated(format!(
                "need {} selected pairs, got {}",
                self.k,
                self.lambda_star.len()
            )));
        }
        let mut signs = Vec::new();
        for &idx in &self.lambda_star {
            let pair = self
                .pairs
                .get(idx)
                .ok_or_else(|| Error::ConfigInvalid(format!("pair index {idx} out of range")))?;
            let sign = pair.sign_treatment.ok_or_else(|| {
                Error::AssumptionViolated(format!(
                    "selected pair ({}, {}) has no sign treatment",
                    pair.pair.0, pair.pair.1
                ))
            })?;
            if signs.contains(&sign) {
                return Err(Error::AssumptionViolated(format!(
                    "sign treatment {sign} repeats across selected pairs"
                )));
            }
            signs.push(sign);
        }
        for pair in &self.pairs {
            let stated: Vec<Direction> = pair.directions.iter().flatten().copied().collect();
            if !stated.is_empty()
                && (stated.iter().all(|&d| d == Direction::Leq)
                    || stated.iter().all(|&d| d == Direction::Geq))
                && stated.len() == pair.directions.len()
            {
                return Err(Error::AssumptionViolated(format!(
                    "pair ({}, {}) declares one direction for every treatment; no compliers exist",
                    pair.pair.0, pair.pair.1
                )));
            }
        }
        Ok(())
    }

    /// The selected pairs in order.
    pub fn selected(&self) -> Vec<&PairMonotonicity> {
        self.lambda_star.iter().map(|&i| &self.pairs[i]).collect()
    }

    /// Sign treatments of the selected pairs, in selection order.
    pub fn selected_signs(&self) -> Vec<usize> {
        self.selected()
            .iter()
            .map(|p| p.sign_treatment.expect("validated"))
            .collect()
    }

    /// The single treatment that is not a sign treatment of any selected pair.
    pub fn reference_treatment(&self) -> usize {
        let signs = self.selected_signs();
        (0..=self.k)
            .find(|t| !signs.contains(t))
            .expect("k selected signs among k+1 treatments leave one out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn with_sign_row_shape() {
        let p = PairMonotonicity::with_sign((1, 0), 2, 1);
        assert_eq!(
            p.directions,
            vec![
                Some(Direction::Leq),
                Some(Direction::Geq),
                Some(Direction::Leq)
            ]
        );
        assert_eq!(p.oriented().unwrap(), (1, 0));
    }

    #[test]
    fn orientation_flips_for_leq_sign() {
        let mut p = PairMonotonicity::with_sign((2, 0), 2, 2);
        // Restate the same pair as (0, 2): every direction flips.
        p.pair = (0, 2);
        for d in p.directions.iter_mut().flatten() {
            *d = d.flipped();
        }
        assert_eq!(p.oriented().unwrap(), (2, 0));
    }

    #[test]
    fn duplicate_signs_rejected() {
        let pairs = vec![
            PairMonotonicity::with_sign((1, 0), 2, 2),
            PairMonotonicity::with_sign((2, 0), 2, 2),
        ];
        assert!(MonotonicitySpec::new(2, pairs, vec![0, 1]).is_err());
    }

    #[test]
    fn reference_treatment_is_the_leftover() {
        let pairs = vec![
            PairMonotonicity::with_sign((2, 1), 2, 1),
            PairMonotonicity::with_sign((2, 0), 2, 2),
        ];
        let spec = MonotonicitySpec::new(2, pairs, vec![0, 1]).unwrap();
        assert_eq!(spec.reference_treatment(), 0);
    }
}
