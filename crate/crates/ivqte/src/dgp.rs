//! Structural data-generating process: utility-maximizing agents choosing a
//! treatment from voucher-dependent budget sets, with potential outcomes
//! driven by latent rank variables.
//!
//! Budget sets are carried in money-metric form: `discount[z][t]` is the cash
//! value of the voucher assignment `z` toward choice `t`, so the chosen
//! treatment under assignment `z` is `argmax_t (base_t + endo_t * w + g_t +
//! discount[z][t])` with i.i.d. Gumbel taste shocks `g_t` and a scalar latent
//! factor `w`. Budget-set inclusion `B(z, t) ⊆ B(z', t)` corresponds to
//! `discount[z][t] <= discount[z'][t]`, which makes the revealed-preference
//! choice restrictions hold unit by unit, not just in distribution.
//!
//! The same latent factor `w` drives the outcome ranks, so treatment choice
//! is endogenous whenever any `endo_t` is nonzero, and instruments are
//! assigned independently of everything latent.

use crate::error::{Error, Result};
use crate::monotonicity::{Direction, MonotonicitySpec, PairMonotonicity};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Exp, Normal, Uniform};

/// Analytic marginal distribution of one potential outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeDistribution {
    Gaussian { mean: f64, sd: f64 },
    Exponential { rate: f64 },
    Uniform { lower: f64, upper: f64 },
}

impl OutcomeDistribution {
    pub fn quantile(&self, tau: f64) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, sd } => {
                Normal::new(mean, sd).unwrap().inverse_cdf(tau)
            }
            OutcomeDistribution::Exponential { rate } => {
                Exp::new(rate).unwrap().inverse_cdf(tau)
            }
            OutcomeDistribution::Uniform { lower, upper } => lower + (upper - lower) * tau,
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, sd } => Normal::new(mean, sd).unwrap().cdf(y),
            OutcomeDistribution::Exponential { rate } => Exp::new(rate).unwrap().cdf(y),
            OutcomeDistribution::Uniform { lower, upper } => {
                Uniform::new(lower, upper).unwrap().cdf(y)
            }
        }
    }

    pub fn density(&self, y: f64) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, sd } => Normal::new(mean, sd).unwrap().pdf(y),
            OutcomeDistribution::Exponential { rate } => Exp::new(rate).unwrap().pdf(y),
            OutcomeDistribution::Uniform { lower, upper } => {
                Uniform::new(lower, upper).unwrap().pdf(y)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, .. } => mean,
            OutcomeDistribution::Exponential { rate } => 1.0 / rate,
            OutcomeDistribution::Uniform { lower, upper } => 0.5 * (lower + upper),
        }
    }
}

/// How rank variables relate across treatment arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RankMode {
    /// One rank shared by every arm: `U_t = U` for all `t`.
    Invariance,
    /// Ranks redrawn per arm from an exchangeable Gaussian copula around the
    /// latent factor; the conditional law of each `U_t` given the factor is
    /// identical across arms.
    Similarity { correlation: f64 },
}

/// Random-utility model over treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityModel {
    /// Deterministic payoff per treatment (net of price).
    pub base: Vec<f64>,
    /// Loading of the latent factor `w` on each treatment's payoff; nonzero
    /// entries create selection on outcome ranks.
    pub endogeneity: Vec<f64>,
    /// Scale of the i.i.d. Gumbel taste shocks.
    pub gumbel_scale: f64,
}

/// Money-metric budget schema: `discount[z][t]` per assignment and choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchema {
    pub discount: Vec<Vec<f64>>,
}

impl BudgetSchema {
    fn validate(&self, n_instruments: usize, k: usize) -> Result<()> {
        if self.discount.len() != n_instruments {
            return Err(Error::ConfigInvalid(format!(
                "budget schema has {} rows, expected {}",
                self.discount.len(),
                n_instruments
            )));
        }
        for row in &self.discount {
            if row.len() != k + 1 {
                return Err(Error::ConfigInvalid(format!(
                    "budget row has {} entries, expected {}",
                    row.len(),
                    k + 1
                )));
            }
            if row.iter().any(|d| !d.is_finite() || *d < 0.0) {
                return Err(Error::ConfigInvalid(
                    "budget discounts must be finite and nonnegative".into(),
                ));
            }
        }
        // The outside option's budget set cannot depend on the assignment.
        let d0 = self.discount[0][0];
        if self.discount.iter().any(|row| row[0] != d0) {
            return Err(Error::ConfigInvalid(
                "discount toward treatment 0 must not vary with the instrument".into(),
            ));
        }
        Ok(())
    }
}

/// Full simulator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Treatments run over `0..=k`.
    pub k: usize,
    pub instrument_labels: Vec<String>,
    pub assignment_probs: Vec<f64>,
    pub outcomes: Vec<OutcomeDistribution>,
    pub rank_mode: RankMode,
    pub utility: UtilityModel,
    pub budget: BudgetSchema,
    pub seed: u64,
}

impl DgpConfig {
    pub fn n_instruments(&self) -> usize {
        self.instrument_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::ConfigInvalid("k must be at least 1".into()));
        }
        let m = self.n_instruments();
        if m < 2 {
            return Err(Error::ConfigInvalid(
                "need at least two instrument values".into(),
            ));
        }
        if self.assignment_probs.len() != m {
            return Err(Error::ConfigInvalid(
                "assignment probabilities must match instrument labels".into(),
            ));
        }
        let total: f64 = self.assignment_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.assignment_probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "assignment probabilities must be positive and sum to 1 (sum = {total})"
            )));
        }
        if self.outcomes.len() != self.k + 1 {
            return Err(Error::ConfigInvalid(format!(
                "need {} outcome distributions, got {}",
                self.k + 1,
                self.outcomes.len()
            )));
        }
        if self.utility.base.len() != self.k + 1 || self.utility.endogeneity.len() != self.k + 1 {
            return Err(Error::ConfigInvalid(
                "utility parameter vectors must have k + 1 entries".into(),
            ));
        }
        if !(self.utility.gumbel_scale > 0.0) {
            return Err(Error::ConfigInvalid("gumbel_scale must be positive".into()));
        }
        if let RankMode::Similarity { correlation } = self.rank_mode {
            if !(0.0..1.0).contains(&correlation) {
                return Err(Error::ConfigInvalid(format!(
                    "rank similarity correlation {correlation} outside [0, 1)"
                )));
            }
        }
        self.budget.validate(m, self.k)
    }

    /// Reject designs whose analytic complier mass on any selected pair is
    /// below the floor; instrument relevance must be verifiably non-vacuous.
    pub fn validate_relevance(&self, spec: &MonotonicitySpec, floor: f64) -> Result<()> {
        let rows = analytic_propensity(self);
        for pair in spec.selected() {
            let (z_plus, z_minus) = pair.oriented()?;
            let sign = pair.sign_treatment.expect("selected pair has a sign");
            let mass = rows[z_plus][sign] - rows[z_minus][sign];
            if mass < floor {
                return Err(Error::ConfigInvalid(format!(
                    "complier mass {mass:.4} for pair ({}, {}) at t = {sign} below floor {floor}",
                    pair.pair.0, pair.pair.1
                )));
            }
        }
        Ok(())
    }

    pub fn instrument_index(&self, label: &str) -> Option<usize> {
        self.instrument_labels.iter().position(|l| l == label)
    }
}

/// Latent side of one simulated unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    /// Rank variable per treatment arm, each marginally uniform on (0, 1).
    pub rank_variables: Vec<f64>,
    /// `Y_t = Q_t(U_t)` per arm.
    pub potential_outcomes: Vec<f64>,
    /// Chosen treatment under each instrument value.
    pub potential_treatments: Vec<usize>,
    /// Realized instrument index.
    pub z: usize,
}

/// One observed record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs {
    pub y: f64,
    pub t: usize,
    pub z: usize,
}

/// Observed data plus optional latent companion records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub instrument_labels: Vec<String>,
    pub records: Vec<Obs>,
    pub latent: Option<Vec<LatentRecord>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.instrument_labels.len()
    }

    pub fn drop_latent(mut self) -> Self {
        self.latent = None;
        self
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    pub fn latent_records(&self) -> Result<&[LatentRecord]> {
        self.latent.as_deref().ok_or(Error::NoLatentData)
    }
}

/// Deterministic argmax over payoffs with ties broken toward the lower index.
pub fn choice_function(utilities: &[f64], budget: &BudgetSchema, z: usize) -> usize {
    let discounts = &budget.discount[z];
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (t, (&u, &d)) in utilities.iter().zip(discounts).enumerate() {
        let v = u + d;
        if v > best {
            best = v;
            arg = t;
        }
    }
    arg
}

/// Simulate `n` units. Per-unit draws derive from `(seed, unit index)`, so
/// output is identical however the loop is scheduled.
pub fn simulate(config: &DgpConfig, n: usize) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::ConfigInvalid("n must be at least 1".into()));
    }
    let k = config.k;
    let m = config.n_instruments();
    let gumbel = Gumbel::new(0.0, config.utility.gumbel_scale)
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let mut cum_probs = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &p in &config.assignment_probs {
        acc += p;
        cum_probs.push(acc);
    }

    let mut records = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for unit in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(unit as u64 + 1);

        let w: f64 = rng.sample(StandardNormal);
        let ranks: Vec<f64> = match config.rank_mode {
            RankMode::Invariance => vec![std_normal.cdf(w); k + 1],
            RankMode::Similarity { correlation } => {
                let load = (1.0 - correlation * correlation).sqrt();
                (0..=k)
                    .map(|_| {
                        let eps: f64 = rng.sample(StandardNormal);
                        std_normal.cdf(correlation * w + load * eps)
                    })
                    .collect()
            }
        };
        let potential_outcomes: Vec<f64> = config
            .outcomes
            .iter()
            .zip(&ranks)
            .map(|(dist, &u)| dist.quantile(u))
            .collect();

        let utilities: Vec<f64> = (0..=k)
            .map(|t| {
                let shock: f64 = rng.sample(gumbel);
                config.utility.base[t] + config.utility.endogeneity[t] * w + shock
            })
            .collect();
        let potential_treatments: Vec<usize> = (0..m)
            .map(|z| choice_function(&utilities, &config.budget, z))
            .collect();

        let draw: f64 = rng.gen();
        let z = cum_probs.partition_point(|&c| c <= draw).min(m - 1);
        let t = potential_treatments[z];
        records.push(Obs {
            y: potential_outcomes[t],
            t,
            z,
        });
        latent.push(LatentRecord {
            rank_variables: ranks,
            potential_outcomes,
            potential_treatments,
            z,
        });
    }

    Ok(Dataset {
        k,
        instrument_labels: config.instrument_labels.clone(),
        records,
        latent: Some(latent),
    })
}

/// Verdict for one `(pair, treatment)` inequality over the latent data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DirectionVerdict {
    /// `D^t_z <= D^t_{z'}` holds for every unit and some unit moves up.
    Leq,
    /// `D^t_z >= D^t_{z'}` holds for every unit and some unit moves down.
    Geq,
    /// No unit moves in either direction.
    Both,
    /// Units move in both directions: monotonicity fails for this entry.
    Neither,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDirectionReport {
    pub treatment: usize,
    /// Units with `D^t_z = 0, D^t_{z'} = 1`.
    pub up_moves: usize,
    /// Units with `D^t_z = 1, D^t_{z'} = 0`.
    pub down_moves: usize,
    pub verdict: DirectionVerdict,
}

/// Check the per-unit monotonicity inequalities of `(z, z')` in latent data.
pub fn verify_monotonicity(data: &Dataset, pair: (usize, usize)) -> Result<Vec<PairDirectionReport>> {
    let latent = data.latent_records()?;
    let (z, z_prime) = pair;
    let mut report = Vec::with_capacity(data.k + 1);
    for t in 0..=data.k {
        let mut up = 0usize;
        let mut down = 0usize;
        for rec in latent {
            let at_z = rec.potential_treatments[z] == t;
            let at_zp = rec.potential_treatments[z_prime] == t;
            match (at_z, at_zp) {
                (false, true) => up += 1,
                (true, false) => down += 1,
                _ => {}
            }
        }
        let verdict = match (up, down) {
            (0, 0) => DirectionVerdict::Both,
            (_, 0) => DirectionVerdict::Leq,
            (0, _) => DirectionVerdict::Geq,
            _ => DirectionVerdict::Neither,
        };
        report.push(PairDirectionReport {
            treatment: t,
            up_moves: up,
            down_moves: down,
            verdict,
        });
    }
    Ok(report)
}

/// A named design: simulator configuration plus its monotonicity structure.
#[derive(Debug, Clone)]
pub struct PresetDesign {
    pub config: DgpConfig,
    pub monotonicity: MonotonicitySpec,
}

fn numeric_labels(m: usize) -> Vec<String> {
    (0..m).map(|z| z.to_string()).collect()
}

/// House-voucher design where voucher `i` discounts house `i` only.
pub fn example_i(k: usize, seed: u64) -> Result<PresetDesign> {
    if k < 1 {
        return Err(Error::ConfigInvalid("example_I needs k >= 1".into()));
    }
    let m = k + 1;
    let discount: Vec<Vec<f64>> = (0..m)
        .map(|z| (0..=k).map(|t| if z == t && t >= 1 { 1.0 } else { 0.0 }).collect())
        .collect();
    let config = DgpConfig {
        k,
        instrument_labels: numeric_labels(m),
        assignment_probs: vec![1.0 / m as f64; m],
        outcomes: (0..=k)
            .map(|t| OutcomeDistribution::Gaussian {
                mean: t as f64,
                sd: 1.0,
            })
            .collect(),
        rank_mode: RankMode::Invariance,
        utility: UtilityModel {
            base: vec![0.0; k + 1],
            endogeneity: (0..=k).map(|t| 0.3 * t as f64 / k as f64).collect(),
            gumbel_scale: 1.0,
        },
        budget: BudgetSchema { discount },
        seed,
    };

    // Inequality rows of the design table: pairs (i, 0) with sign treatment i;
    // for k = 2 the table also pins (1, 2) with no restriction at t = 0.
    let mut pairs: Vec<PairMonotonicity> = (1..=k)
        .map(|i| PairMonotonicity::with_sign((i, 0), k, i))
        .collect();
    let lambda_star: Vec<usize> = (0..k).collect();
    if k == 2 {
        pairs.push(PairMonotonicity {
            pair: (1, 2),
            directions: vec![None, Some(Direction::Geq), Some(Direction::Leq)],
            sign_treatment: Some(1),
        });
    }
    let monotonicity = MonotonicitySpec::new(k, pairs, lambda_star)?;
    Ok(PresetDesign {
        config,
        monotonicity,
    })
}

/// Ordered-houses design where voucher `i` discounts houses `i..=k`.
pub fn example_ii(k: usize, seed: u64) -> Result<PresetDesign> {
    if k < 1 {
        return Err(Error::ConfigInvalid("example_II needs k >= 1".into()));
    }
    let m = k + 1;
    let discount: Vec<Vec<f64>> = (0..m)
        .map(|z| {
            (0..=k)
                .map(|t| if z >= 1 && t >= z { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let config = DgpConfig {
        k,
        instrument_labels: numeric_labels(m),
        assignment_probs: vec![1.0 / m as f64; m],
        outcomes: (0..=k)
            .map(|t| OutcomeDistribution::Gaussian {
                mean: t as f64,
                sd: 1.0,
            })
            .collect(),
        rank_mode: RankMode::Invariance,
        utility: UtilityModel {
            base: vec![0.0; k + 1],
            endogeneity: (0..=k).map(|t| 0.3 * t as f64 / k as f64).collect(),
            gumbel_scale: 1.0,
        },
        budget: BudgetSchema { discount },
        seed,
    };

    // Rows (i, i+1) with sign i, plus (k, 0) with sign k.
    let mut pairs: Vec<PairMonotonicity> = (1..k)
        .map(|i| PairMonotonicity::with_sign((i, i + 1), k, i))
        .collect();
    pairs.push(PairMonotonicity::with_sign((k, 0), k, k));
    let lambda_star: Vec<usize> = (0..k).collect();
    let monotonicity = MonotonicitySpec::new(k, pairs, lambda_star)?;
    Ok(PresetDesign {
        config,
        monotonicity,
    })
}

/// Housing-relocation design with instruments `a` (no voucher), `b`
/// (unrestricted voucher), `c` (restricted voucher) and treatments 0 (stay),
/// 1 (medium-poverty move), 2 (low-poverty move).
pub fn mto(seed: u64) -> Result<PresetDesign> {
    let config = DgpConfig {
        k: 2,
        instrument_labels: vec!["a".into(), "b".into(), "c".into()],
        assignment_probs: vec![0.3, 0.3, 0.4],
        outcomes: (0..=2)
            .map(|t| OutcomeDistribution::Gaussian {
                mean: t as f64,
                sd: 1.0,
            })
            .collect(),
        rank_mode: RankMode::Invariance,
        utility: UtilityModel {
            base: vec![0.0, -0.6, -1.2],
            endogeneity: vec![0.0, 0.15, 0.3],
            gumbel_scale: 1.0,
        },
        budget: BudgetSchema {
            // b subsidizes both moves, c only the low-poverty move.
            discount: vec![
                vec![0.0, 0.0, 0.0],
                vec![0.0, 1.5, 1.5],
                vec![0.0, 0.0, 1.5],
            ],
        },
        seed,
    };

    let a = 0usize;
    let b = 1usize;
    let c = 2usize;
    let pairs = vec![
        PairMonotonicity::with_sign((c, a), 2, 2),
        PairMonotonicity::with_sign((b, c), 2, 1),
    ];
    let monotonicity = MonotonicitySpec::new(2, pairs, vec![0, 1])?;
    Ok(PresetDesign {
        config,
        monotonicity,
    })
}

/// Look up a preset by CLI name.
pub fn preset(name: &str, k: Option<usize>, seed: u64) -> Result<PresetDesign> {
    match name {
        "example_I" | "example_i" => example_i(k.unwrap_or(2), seed),
        "example_II" | "example_ii" => example_ii(k.unwrap_or(2), seed),
        "mto" => mto(seed),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Analytic moments of the design, by quadrature over the latent factor.
// ---------------------------------------------------------------------------

const QUAD_INTERVALS: usize = 2000;
const QUAD_SPAN: f64 = 8.0;

fn softmax_choice_probs(config: &DgpConfig, z: usize, w: f64) -> Vec<f64> {
    let scale = config.utility.gumbel_scale;
    let v: Vec<f64> = (0..=config.k)
        .map(|t| {
            (config.utility.base[t]
                + config.utility.endogeneity[t] * w
                + config.budget.discount[z][t])
                / scale
        })
        .collect();
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - vmax).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn std_normal_pdf(w: f64) -> f64 {
    (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson integral of `f(w) * phi(w)` over `[lo, hi]`.
fn gauss_weighted_integral(lo: f64, hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let n = QUAD_INTERVALS;
    let h = (hi - lo) / n as f64;
    let mut sum = f(lo) * std_normal_pdf(lo) + f(hi) * std_normal_pdf(hi);
    for i in 1..n {
        let w = lo + h * i as f64;
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += weight * f(w) * std_normal_pdf(w);
    }
    sum * h / 3.0
}

/// Exact (to quadrature accuracy) choice probabilities `p_t(z)`, rows
/// normalized so each sums to one.
pub fn analytic_propensity(config: &DgpConfig) -> Vec<Vec<f64>> {
    let m = config.n_instruments();
    let norm = gauss_weighted_integral(-QUAD_SPAN, QUAD_SPAN, |_| 1.0);
    (0..m)
        .map(|z| {
            let row: Vec<f64> = (0..=config.k)
                .map(|t| {
                    gauss_weighted_integral(-QUAD_SPAN, QUAD_SPAN, |w| {
                        softmax_choice_probs(config, z, w)[t]
                    }) / norm
                })
                .collect();
            row
        })
        .collect()
}

/// `P(U_t <= tau | w)` under the configured rank mode.
fn rank_cdf_given_factor(config: &DgpConfig, tau: f64, w: f64) -> f64 {
    match config.rank_mode {
        RankMode::Invariance => {
            let std_normal = Normal::new(0.0, 1.0).unwrap();
            if std_normal.cdf(w) <= tau {
                1.0
            } else {
                0.0
            }
        }
        RankMode::Similarity { correlation } => {
            let std_normal = Normal::new(0.0, 1.0).unwrap();
            let load = (1.0 - correlation * correlation).sqrt();
            std_normal.cdf((std_normal.inverse_cdf(tau) - correlation * w) / load)
        }
    }
}

/// Joint mass `P(U_t <= tau, T_z = t)` by quadrature.
fn joint_rank_choice(config: &DgpConfig, tau: f64, t: usize, z: usize) -> f64 {
    let norm = gauss_weighted_integral(-QUAD_SPAN, QUAD_SPAN, |_| 1.0);
    match config.rank_mode {
        RankMode::Invariance => {
            let std_normal = Normal::new(0.0, 1.0).unwrap();
            let w_tau = std_normal.inverse_cdf(tau.clamp(1e-14, 1.0 - 1e-14));
            gauss_weighted_integral(-QUAD_SPAN, w_tau.min(QUAD_SPAN), |w| {
                softmax_choice_probs(config, z, w)[t]
            }) / norm
        }
        RankMode::Similarity { .. } => {
            gauss_weighted_integral(-QUAD_SPAN, QUAD_SPAN, |w| {
                rank_cdf_given_factor(config, tau, w) * softmax_choice_probs(config, z, w)[t]
            }) / norm
        }
    }
}

/// Analytic observed-cell CDFs and densities for the configured design.
///
/// When no treatment payoff loads on the latent factor, selection is
/// independent of ranks and each cell CDF equals the marginal outcome CDF
/// exactly; otherwise cell CDFs are computed by quadrature.
#[derive(Debug, Clone)]
pub struct AnalyticCells {
    config: DgpConfig,
    selection_free: bool,
    propensity: Vec<Vec<f64>>,
}

impl AnalyticCells {
    pub fn new(config: &DgpConfig) -> Self {
        let selection_free = config.utility.endogeneity.iter().all(|&e| e == 0.0);
        let propensity = analytic_propensity(config);
        AnalyticCells {
            config: config.clone(),
            selection_free,
            propensity,
        }
    }

    pub fn propensity_rows(&self) -> &[Vec<f64>] {
        &self.propensity
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    /// `F_{Y|T,Z}(y | t, z)`.
    pub fn cell_cdf(&self, t: usize, z: usize, y: f64) -> f64 {
        let tau = self.config.outcomes[t].cdf(y);
        if self.selection_free {
            return tau;
        }
        if tau <= 0.0 {
            return 0.0;
        }
        if tau >= 1.0 {
            return 1.0;
        }
        joint_rank_choice(&self.config, tau, t, z) / self.propensity[z][t]
    }

    /// Outcome density in cell `(t, z)`; exact only in the selection-free
    /// case, otherwise obtained by differencing the quadrature CDF.
    pub fn cell_density(&self, t: usize, z: usize, y: f64) -> f64 {
        if self.selection_free {
            return self.config.outcomes[t].density(y);
        }
        let h = 1e-4;
        (self.cell_cdf(t, z, y + h) - self.cell_cdf(t, z, y - h)) / (2.0 * h)
    }

    /// `P(Y_t <= y, C^t_{z, z'}) / P(C^t_{z, z'})` for a pair whose
    /// monotonicity at `t` holds by construction (`{T_z = t} ⊆ {T_{z'} = t}`).
    pub fn complier_cdf(&self, t: usize, z: usize, z_prime: usize, y: f64) -> f64 {
        let tau = self.config.outcomes[t].cdf(y);
        if self.selection_free {
            return tau;
        }
        if tau <= 0.0 {
            return 0.0;
        }
        if tau >= 1.0 {
            return 1.0;
        }
        let num = joint_rank_choice(&self.config, tau, t, z_prime)
            - joint_rank_choice(&self.config, tau, t, z);
        let den = self.propensity[z_prime][t] - self.propensity[z][t];
        (num / den).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_example_i() -> PresetDesign {
        example_i(2, 7).unwrap()
    }

    #[test]
    fn choice_prefers_discounted_house() {
        let design = small_example_i();
        // A family that values house 1 strongly buys it under voucher 1.
        let utilities = vec![0.0, 2.0, -1.0];
        assert_eq!(choice_function(&utilities, &design.config.budget, 1), 1);
        // Full indifference with equal budgets falls to the lowest index.
        let flat = vec![0.0, 0.0, 0.0];
        assert_eq!(choice_function(&flat, &design.config.budget, 0), 0);
    }

    #[test]
    fn choice_rule_monotone_in_single_discount() {
        // Buying house 2 under voucher 1 implies buying it with no voucher:
        // moving 1 -> 0 only removes house 1's discount.
        let design = small_example_i();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let utilities: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let at_1 = choice_function(&utilities, &design.config.budget, 1);
            let at_0 = choice_function(&utilities, &design.config.budget, 0);
            if at_1 == 2 {
                assert_eq!(at_0, 2);
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_and_total() {
        let design = small_example_i();
        let a = simulate(&design.config, 500).unwrap();
        let b = simulate(&design.config, 500).unwrap();
        assert_eq!(a, b);

        let one = simulate(&design.config, 1).unwrap();
        assert_eq!(one.n(), 1);
        let rec = &one.latent.as_ref().unwrap()[0];
        assert_eq!(rec.potential_treatments.len(), 3);
    }

    #[test]
    fn simulated_outcome_means_match_the_model() {
        let design = small_example_i();
        let data = simulate(&design.config, 10_000).unwrap();
        let latent = data.latent_records().unwrap();
        let mean_y2: f64 =
            latent.iter().map(|r| r.potential_outcomes[2]).sum::<f64>() / latent.len() as f64;
        assert!((mean_y2 - 2.0).abs() < 0.05, "mean {mean_y2}");
    }

    #[test]
    fn monotonicity_tables_hold_per_unit() {
        for design in [
            example_i(2, 3).unwrap(),
            example_ii(3, 3).unwrap(),
            mto(3).unwrap(),
        ] {
            let data = simulate(&design.config, 4000).unwrap();
            for pair in &design.monotonicity.pairs {
                let report = verify_monotonicity(&data, pair.pair).unwrap();
                for (t, dir) in pair.directions.iter().enumerate() {
                    let entry = &report[t];
                    match dir {
                        Some(Direction::Leq) => assert_eq!(
                            entry.down_moves, 0,
                            "pair {:?} t={t} has down moves",
                            pair.pair
                        ),
                        Some(Direction::Geq) => assert_eq!(
                            entry.up_moves, 0,
                            "pair {:?} t={t} has up moves",
                            pair.pair
                        ),
                        None => {}
                    }
                }
            }
        }
    }

    #[test]
    fn example_i_mixed_moves_on_unrestricted_pair() {
        // No inequality is claimed between D^0_1 and D^0_2; both directions
        // should occur in a large sample.
        let design = small_example_i();
        let data = simulate(&design.config, 20_000).unwrap();
        let report = verify_monotonicity(&data, (1, 2)).unwrap();
        assert_eq!(report[0].verdict, DirectionVerdict::Neither);
    }

    #[test]
    fn mto_design_matches_its_table() {
        let design = mto(5).unwrap();
        let data = simulate(&design.config, 4000).unwrap();
        let a = 0;
        let c = 2;
        let report = verify_monotonicity(&data, (c, a)).unwrap();
        assert_eq!(report[0].verdict, DirectionVerdict::Leq);
        assert_eq!(report[1].verdict, DirectionVerdict::Leq);
        assert_eq!(report[2].verdict, DirectionVerdict::Geq);
    }

    #[test]
    fn rank_variables_are_uniform() {
        let design = small_example_i();
        let data = simulate(&design.config, 10_000).unwrap();
        let latent = data.latent_records().unwrap();
        let mut u: Vec<f64> = latent.iter().map(|r| r.rank_variables[0]).collect();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let upper = (i + 1) as f64 / n - x;
                let lower = x - i as f64 / n;
                upper.max(lower)
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.36 / n.sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn instrument_independent_of_ranks() {
        let design = small_example_i();
        let data = simulate(&design.config, 10_000).unwrap();
        let latent = data.latent_records().unwrap();
        let bins = 10;
        let m = 3;
        let mut table = vec![vec![0usize; m]; bins];
        for rec in latent {
            let b = ((rec.rank_variables[0] * bins as f64) as usize).min(bins - 1);
            table[b][rec.z] += 1;
        }
        let n = latent.len() as f64;
        let row_totals: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
        let col_totals: Vec<f64> = (0..m)
            .map(|z| table.iter().map(|r| r[z]).sum::<usize>() as f64)
            .collect();
        let mut chi2 = 0.0;
        for (b, row) in table.iter().enumerate() {
            for (z, &count) in row.iter().enumerate() {
                let expected = row_totals[b] * col_totals[z] / n;
                chi2 += (count as f64 - expected).powi(2) / expected;
            }
        }
        // df = (10 - 1)(3 - 1) = 18; the 0.999 quantile is about 42.3.
        assert!(chi2 < 42.3, "chi-square {chi2}");
    }

    #[test]
    fn rank_similarity_keeps_ranks_uniform_but_distinct() {
        let mut design = small_example_i();
        design.config.rank_mode = RankMode::Similarity { correlation: 0.7 };
        let data = simulate(&design.config, 10_000).unwrap();
        let latent = data.latent_records().unwrap();
        assert!(latent
            .iter()
            .any(|r| r.rank_variables[0] != r.rank_variables[1]));
        for t in 0..=2 {
            let mut u: Vec<f64> = latent.iter().map(|r| r.rank_variables[t]).collect();
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = u.len() as f64;
            let ks = u
                .iter()
                .enumerate()
                .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
                .fold(0.0, f64::max);
            assert!(ks < 1.36 / n.sqrt(), "arm {t} KS {ks}");
        }
    }

    #[test]
    fn analytic_propensity_rows_sum_to_one() {
        let design = small_example_i();
        let rows = analytic_propensity(&design.config);
        for row in &rows {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "row sum {total}");
        }
        // Voucher 1 raises the take-up of house 1.
        assert!(rows[1][1] > rows[0][1] + 0.05);
    }

    #[test]
    fn analytic_propensity_matches_simulation() {
        let design = small_example_i();
        let rows = analytic_propensity(&design.config);
        let data = simulate(&design.config, 50_000).unwrap();
        let latent = data.latent_records().unwrap();
        for z in 0..3 {
            for t in 0..=2 {
                let freq = latent
                    .iter()
                    .filter(|r| r.potential_treatments[z] == t)
                    .count() as f64
                    / latent.len() as f64;
                assert!(
                    (freq - rows[z][t]).abs() < 0.01,
                    "z={z} t={t}: sim {freq} vs quad {}",
                    rows[z][t]
                );
            }
        }
    }

    #[test]
    fn analytic_cells_selection_free_shortcut() {
        let mut design = small_example_i();
        design.config.utility.endogeneity = vec![0.0; 3];
        let cells = AnalyticCells::new(&design.config);
        let y = 0.7;
        let expected = design.config.outcomes[1].cdf(y);
        assert_eq!(cells.cell_cdf(1, 0, y), expected);
        assert_eq!(cells.complier_cdf(1, 0, 1, y), expected);
    }

    #[test]
    fn analytic_cell_cdf_matches_simulation_under_selection() {
        let design = small_example_i();
        let cells = AnalyticCells::new(&design.config);
        let data = simulate(&design.config, 50_000).unwrap();
        let cell: Vec<f64> = data
            .records
            .iter()
            .filter(|r| r.t == 1 && r.z == 1)
            .map(|r| r.y)
            .collect();
        let n = cell.len() as f64;
        for y in [0.0, 0.8, 1.6] {
            let freq = cell.iter().filter(|&&v| v <= y).count() as f64 / n;
            let analytic = cells.cell_cdf(1, 1, y);
            assert!(
                (freq - analytic).abs() < 0.02,
                "y={y}: sim {freq} vs quad {analytic}"
            );
        }
    }

    #[test]
    fn preset_relevance_floor_holds() {
        for design in [
            example_i(2, 1).unwrap(),
            example_i(3, 1).unwrap(),
            example_ii(3, 1).unwrap(),
            mto(1).unwrap(),
        ] {
            design
                .config
                .validate_relevance(&design.monotonicity, 0.05)
                .unwrap();
        }
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(
            preset("nonesuch", None, 0),
            Err(Error::UnknownPreset(_))
        ));
    }
}
