//! Bilateral collateralized exposure: portfolio simulation, the
//! rating-triggered collateral account and the CDVA/CCVA/CBVA Monte
//! Carlo estimators, plus pre-default rating analytics.
//!
//! Conventions follow the usual bilateral setup: the portfolio value
//! `V` is seen from the bank, collateral `C > 0` is held by the bank,
//! `x⁺ = max(x, 0)` and `x⁻ = min(x, 0)`. The collateral account is a
//! pure cash account: at a default time it is still worth the balance
//! of the last posting date strictly before the default.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Measure, PhctmcModel};
use crate::error::{Error, Result};
use crate::matfun::SquareMatrix;
use crate::rating::TENOR_TOL;
use crate::simulation::{component_seed, simulate_paths, RatingPath};

/// Seed tags for the three independent scenario components.
const SEED_TAG_BANK: u64 = 0x42414e4b;
const SEED_TAG_CPTY: u64 = 0x43505459;
const SEED_TAG_PORTFOLIO: u64 = 0x504f5254;

/// Synthetic netting-set driver: a permanent Brownian flow plus
/// `n_flows` flows with uniformly distributed redemption times. Each
/// flow's volatility is drawn standard normal times `vol_scale`, the
/// sign encoding direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioModel {
    pub initial_value: f64,
    pub n_flows: usize,
    /// Currency per square-root year.
    pub vol_scale: f64,
    pub maturity: f64,
    pub postings_per_year: usize,
}

impl PortfolioModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0) {
            return Err(Error::Invariant("maturity must be positive".into()));
        }
        if self.postings_per_year < 1 {
            return Err(Error::Invariant("postings per year must be at least 1".into()));
        }
        if !self.vol_scale.is_finite() || self.vol_scale < 0.0 {
            return Err(Error::Invariant("vol scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Posting grid t_0 = 0 < ... < t_n = maturity.
    pub fn grid(&self) -> Vec<f64> {
        let steps = self.n_steps();
        (0..=steps).map(|j| self.maturity * j as f64 / steps as f64).collect()
    }

    pub fn n_steps(&self) -> usize {
        ((self.maturity * self.postings_per_year as f64).round() as usize).max(1)
    }

    pub fn step(&self) -> f64 {
        self.maturity / self.n_steps() as f64
    }
}

/// Mark-to-market values on the posting grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioPath {
    pub values: Vec<f64>,
}

/// Collateral balances on the posting grid.
#[derive(Debug, Clone)]
pub struct CollateralPath {
    pub values: Vec<f64>,
}

/// Collateral regime of the netting agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollateralRegime {
    Uncollateralized,
    Perfect,
    RatingTriggers,
}

impl std::fmt::Display for CollateralRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CollateralRegime::Uncollateralized => write!(f, "uncollateralized"),
            CollateralRegime::Perfect => write!(f, "perfect"),
            CollateralRegime::RatingTriggers => write!(f, "rating-triggers"),
        }
    }
}

impl std::str::FromStr for CollateralRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncollateralized" | "none" => Ok(CollateralRegime::Uncollateralized),
            "perfect" => Ok(CollateralRegime::Perfect),
            "rating-triggers" | "triggers" => Ok(CollateralRegime::RatingTriggers),
            other => Err(Error::Config(format!("unknown collateral regime '{other}'"))),
        }
    }
}

/// Per-rating unsecured-exposure thresholds for both parties.
/// Infinite thresholds disable posting entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollateralAgreement {
    pub regime: CollateralRegime,
    pub bank_thresholds: Vec<f64>,
    pub cpty_thresholds: Vec<f64>,
}

impl CollateralAgreement {
    pub fn uncollateralized(dim: usize) -> Self {
        Self {
            regime: CollateralRegime::Uncollateralized,
            bank_thresholds: vec![f64::INFINITY; dim],
            cpty_thresholds: vec![f64::INFINITY; dim],
        }
    }

    pub fn perfect(dim: usize) -> Self {
        Self {
            regime: CollateralRegime::Perfect,
            bank_thresholds: vec![0.0; dim],
            cpty_thresholds: vec![0.0; dim],
        }
    }

    pub fn rating_triggers(bank: Vec<f64>, cpty: Vec<f64>) -> Result<Self> {
        for t in bank.iter().chain(cpty.iter()) {
            if t.is_nan() || *t < 0.0 {
                return Err(Error::Invariant(format!("threshold must be >= 0, got {t}")));
            }
        }
        if bank.len() != cpty.len() {
            return Err(Error::Dimension("threshold vectors differ in length".into()));
        }
        Ok(Self {
            regime: CollateralRegime::RatingTriggers,
            bank_thresholds: bank,
            cpty_thresholds: cpty,
        })
    }

    /// Agreement for the given regime, using the supplied trigger
    /// schedules only in the rating-trigger case.
    pub fn for_regime(regime: CollateralRegime, bank: &[f64], cpty: &[f64]) -> Result<Self> {
        match regime {
            CollateralRegime::Uncollateralized => Ok(Self::uncollateralized(bank.len())),
            CollateralRegime::Perfect => Ok(Self::perfect(bank.len())),
            CollateralRegime::RatingTriggers => {
                Self::rating_triggers(bank.to_vec(), cpty.to_vec())
            }
        }
    }

    pub fn bank_threshold(&self, rating: usize) -> f64 {
        self.bank_thresholds[rating]
    }

    pub fn cpty_threshold(&self, rating: usize) -> f64 {
        self.cpty_thresholds[rating]
    }
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn neg(x: f64) -> f64 {
    x.min(0.0)
}

/// Target collateral balance for a portfolio value and the two parties'
/// current ratings: `(v + ρ_B)⁻ + (v − ρ_C)⁺`.
pub fn collateral_target(
    v: f64,
    bank_rating: usize,
    cpty_rating: usize,
    agreement: &CollateralAgreement,
) -> f64 {
    let rho_bank = agreement.bank_threshold(bank_rating);
    let rho_cpty = agreement.cpty_threshold(cpty_rating);
    neg(v + rho_bank) + pos(v - rho_cpty)
}

/// Collateral balance on every posting date via the posting recursion:
/// each date the parties top up (or recall) against the thresholds
/// implied by their current ratings. Boundary balances are zero.
pub fn collateral_account_path(
    portfolio: &PortfolioPath,
    bank: &RatingPath,
    cpty: &RatingPath,
    agreement: &CollateralAgreement,
    grid: &[f64],
) -> Result<CollateralPath> {
    if portfolio.values.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "portfolio path has {} values for {} grid dates",
            portfolio.values.len(),
            grid.len()
        )));
    }
    let n = grid.len();
    let mut values = vec![0.0f64; n];
    for j in 1..n.saturating_sub(1) {
        let v = portfolio.values[j];
        let rho_bank = agreement.bank_threshold(bank.state_at(grid[j]));
        let rho_cpty = agreement.cpty_threshold(cpty.state_at(grid[j]));
        let previous = values[j - 1];
        let bank_posting = neg(v + rho_bank) - neg(previous);
        let cpty_posting = pos(v - rho_cpty) - pos(previous);
        values[j] = previous + bank_posting + cpty_posting;
    }
    // The account is closed at maturity.
    if n > 1 {
        values[n - 1] = 0.0;
    }
    Ok(CollateralPath { values })
}

/// Monte Carlo configuration for the valuation-adjustment estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XvaConfig {
    pub lgd_bank: f64,
    pub lgd_cpty: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub bank_initial: usize,
    pub cpty_initial: usize,
}

impl XvaConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, lgd) in [("bank", self.lgd_bank), ("cpty", self.lgd_cpty)] {
            if !(0.0..=1.0).contains(&lgd) {
                return Err(Error::Invariant(format!("{name} LGD {lgd} outside [0, 1]")));
            }
        }
        if self.n_paths == 0 {
            return Err(Error::Invariant("n_paths must be at least 1".into()));
        }
        if self.bank_initial >= dim || self.cpty_initial >= dim {
            return Err(Error::Invariant("initial rating outside the scale".into()));
        }
        Ok(())
    }
}

/// Point estimate with its Monte Carlo standard error (undefined for a
/// single path).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XvaEstimate {
    pub value: f64,
    pub standard_error: Option<f64>,
}

/// Valuation adjustments for one collateral agreement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XvaReport {
    pub regime: CollateralRegime,
    pub cdva: XvaEstimate,
    pub ccva: XvaEstimate,
    /// Exactly cdva − ccva.
    pub cbva: f64,
    pub n_paths: usize,
    pub bank_defaults: usize,
    pub cpty_defaults: usize,
}

/// The common scenario set all regimes are evaluated on: rating paths of
/// both parties under the risk-neutral measure plus portfolio paths.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub grid: Vec<f64>,
    pub bank_paths: Vec<RatingPath>,
    pub cpty_paths: Vec<RatingPath>,
    pub portfolio_paths: Vec<PortfolioPath>,
}

/// Simulate one matched scenario set under the risk-neutral measure.
/// Identical (model, pm, cfg) always yield the identical set, which is
/// what makes regime comparisons pathwise.
pub fn simulate_scenario_set(
    model: &PhctmcModel,
    pm: &PortfolioModel,
    cfg: &XvaConfig,
) -> Result<ScenarioSet> {
    pm.validate()?;
    cfg.validate(model.scale.len())?;
    if (pm.maturity - model.schedule.horizon()).abs() > TENOR_TOL {
        return Err(Error::Invariant(format!(
            "portfolio maturity {} does not match the model horizon {}",
            pm.maturity,
            model.schedule.horizon()
        )));
    }
    let bank_paths = simulate_paths(
        model,
        Measure::RiskNeutral,
        cfg.bank_initial,
        cfg.n_paths,
        component_seed(cfg.seed, SEED_TAG_BANK),
    )?;
    let cpty_paths = simulate_paths(
        model,
        Measure::RiskNeutral,
        cfg.cpty_initial,
        cfg.n_paths,
        component_seed(cfg.seed, SEED_TAG_CPTY),
    )?;
    let portfolio_paths =
        simulate_portfolio(pm, cfg.n_paths, component_seed(cfg.seed, SEED_TAG_PORTFOLIO))?;
    Ok(ScenarioSet {
        grid: pm.grid(),
        bank_paths,
        cpty_paths,
        portfolio_paths,
    })
}

/// Simulate mark-to-market paths of the synthetic portfolio on the
/// posting grid.
pub fn simulate_portfolio(
    pm: &PortfolioModel,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PortfolioPath>> {
    pm.validate()?;
    if n_paths == 0 {
        return Err(Error::Invariant("n_paths must be at least 1".into()));
    }
    let steps = pm.n_steps();
    let dt_sqrt = pm.step().sqrt();
    let grid = pm.grid();
    Ok((0..n_paths)
        .into_par_iter()
        .map(|idx| {
            let mut rng = portfolio_rng(seed, idx as u64);
            let normal = StandardNormal;
            let n_drivers = pm.n_flows + 1;

            let sigmas: Vec<f64> = (0..n_drivers)
                .map(|_| {
                    <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng)
                        * pm.vol_scale
                })
                .collect();
            // Driver 0 never redeems, the rest die uniformly on [0, T].
            let redemption: Vec<f64> = (0..pm.n_flows)
                .map(|_| rand::Rng::random::<f64>(&mut rng) * pm.maturity)
                .collect();

            let mut brownians = vec![0.0f64; n_drivers];
            let mut values = Vec::with_capacity(steps + 1);
            values.push(pm.initial_value);
            for j in 1..=steps {
                let t = grid[j];
                let mut v = pm.initial_value;
                for (i, w) in brownians.iter_mut().enumerate() {
                    *w += dt_sqrt
                        * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
                    let alive = i == 0 || t <= redemption[i - 1];
                    if alive {
                        v += sigmas[i] * *w;
                    }
                }
                values.push(v);
            }
            PortfolioPath { values }
        })
        .collect())
}

fn portfolio_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Deterministic pairwise summation: the result is independent of how
/// the per-path work was scheduled because the input order is fixed.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

fn estimate_from_contributions(contributions: &[f64]) -> XvaEstimate {
    let n = contributions.len();
    let mean = pairwise_sum(contributions) / n as f64;
    let standard_error = if n > 1 {
        let squared: Vec<f64> =
            contributions.iter().map(|c| (c - mean) * (c - mean)).collect();
        Some((pairwise_sum(&squared) / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt())
    } else {
        None
    };
    XvaEstimate {
        value: mean,
        standard_error,
    }
}

/// Index of the grid date at or immediately before t.
fn grid_index_at(t: f64, step: f64, last: usize) -> usize {
    ((t / step).floor() as usize).min(last)
}

/// Index of the last posting date strictly before t.
fn grid_index_before(t: f64, step: f64, last: usize) -> usize {
    let steps = t / step;
    let rounded = steps.round();
    let idx = if (steps - rounded).abs() < 1e-9 {
        rounded as isize - 1
    } else {
        steps.floor() as isize
    };
    idx.clamp(0, last as isize) as usize
}

/// Evaluate both valuation adjustments on an existing scenario set.
pub fn evaluate_xva(
    scenarios: &ScenarioSet,
    agreement: &CollateralAgreement,
    cfg: &XvaConfig,
    default_index: usize,
) -> Result<XvaReport> {
    let n = scenarios.portfolio_paths.len();
    if scenarios.bank_paths.len() != n || scenarios.cpty_paths.len() != n {
        return Err(Error::Dimension("scenario components differ in path count".into()));
    }
    let grid = &scenarios.grid;
    let step = grid[1] - grid[0];
    let last = grid.len() - 1;
    let horizon = *grid.last().unwrap();

    struct PathOutcome {
        cdva: f64,
        ccva: f64,
        bank_default: bool,
        cpty_default: bool,
    }

    let outcomes: Vec<PathOutcome> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let bank = &scenarios.bank_paths[idx];
            let cpty = &scenarios.cpty_paths[idx];
            let portfolio = &scenarios.portfolio_paths[idx];

            let tau_bank = bank.first_hit(default_index).filter(|&t| t < horizon);
            let tau_cpty = cpty.first_hit(default_index).filter(|&t| t < horizon);
            let (tau, bank_defaulted_first) = match (tau_bank, tau_cpty) {
                (None, None) => {
                    return PathOutcome {
                        cdva: 0.0,
                        ccva: 0.0,
                        bank_default: false,
                        cpty_default: false,
                    }
                }
                (Some(tb), None) => (tb, true),
                (None, Some(tc)) => (tc, false),
                // Exact ties resolve to a counterparty default.
                (Some(tb), Some(tc)) => (tb.min(tc), tb < tc),
            };

            let collateral = collateral_account_path(portfolio, bank, cpty, agreement, grid)
                .expect("scenario paths share the grid");
            let v_tau = portfolio.values[grid_index_at(tau, step, last)];
            let c_tau = if tau <= grid[0] {
                0.0
            } else {
                collateral.values[grid_index_before(tau, step, last)]
            };

            if bank_defaulted_first {
                PathOutcome {
                    cdva: cfg.lgd_bank * neg(neg(v_tau) - neg(c_tau)),
                    ccva: 0.0,
                    bank_default: true,
                    cpty_default: false,
                }
            } else {
                PathOutcome {
                    cdva: 0.0,
                    ccva: cfg.lgd_cpty * pos(pos(v_tau) - pos(c_tau)),
                    bank_default: false,
                    cpty_default: true,
                }
            }
        })
        .collect();

    let cdva_raw: Vec<f64> = outcomes.iter().map(|o| o.cdva).collect();
    let ccva_raw: Vec<f64> = outcomes.iter().map(|o| o.ccva).collect();
    let mut cdva = estimate_from_contributions(&cdva_raw);
    // The debit adjustment is reported with a positive sign.
    cdva.value = -cdva.value;
    let ccva = estimate_from_contributions(&ccva_raw);
    let cbva = cdva.value - ccva.value;

    Ok(XvaReport {
        regime: agreement.regime,
        cdva,
        ccva,
        cbva,
        n_paths: n,
        bank_defaults: outcomes.iter().filter(|o| o.bank_default).count(),
        cpty_defaults: outcomes.iter().filter(|o| o.cpty_default).count(),
    })
}

/// Simulate and evaluate in one call.
pub fn estimate_xva(
    model: &PhctmcModel,
    pm: &PortfolioModel,
    agreement: &CollateralAgreement,
    cfg: &XvaConfig,
) -> Result<XvaReport> {
    let scenarios = simulate_scenario_set(model, pm, cfg)?;
    evaluate_xva(&scenarios, agreement, cfg, model.scale.default_index())
}

/// Pre-default frequencies: entry (i, j) is the fraction of paths
/// starting at rating i that defaulted before the horizon with j as the
/// last rating before default. Row sums are per-start default
/// frequencies; paths that never default contribute nothing.
pub fn pre_default_distribution(
    blocks: &[Vec<RatingPath>],
    default_index: usize,
) -> Result<SquareMatrix> {
    let dim = blocks.len();
    let mut hist = SquareMatrix::zeros(dim, dim);
    for (i, block) in blocks.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::Invariant(format!("empty path block for rating {i}")));
        }
        for path in block {
            let defaulted = path
                .first_hit(default_index)
                .map(|t| t > 0.0 && t < path.horizon)
                .unwrap_or(false);
            if !defaulted {
                continue;
            }
            if let Some(previous) = path.state_before(default_index) {
                hist[(i, previous)] += 1.0;
            }
        }
        let total = block.len() as f64;
        for j in 0..dim {
            hist[(i, j)] /= total;
        }
    }
    Ok(hist)
}

/// Collapse a pre-default histogram (equal-sized blocks) into the
/// distribution of the pre-default rating conditional on default.
pub fn conditional_pre_default_mass(hist: &SquareMatrix) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return vec![0.0; hist.ncols()];
    }
    (0..hist.ncols()).map(|j| hist.column(j).sum() / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{apply_exponential_com, MeasureChangeParams};
    use crate::rating::{Generator, PiecewiseSchedule, RatingScale};
    use nalgebra::{dmatrix, dvector};

    fn flat_portfolio(v0: f64) -> PortfolioModel {
        PortfolioModel {
            initial_value: v0,
            n_flows: 0,
            vol_scale: 0.0,
            maturity: 1.0,
            postings_per_year: 12,
        }
    }

    fn three_state_model(default_rate_a: f64, default_rate_b: f64) -> PhctmcModel {
        let scale = RatingScale::new(vec!["A".into(), "B".into(), "D".into()]).unwrap();
        let schedule = PiecewiseSchedule::new(vec![0.0, 1.0]).unwrap();
        let gen_p = Generator::try_new(dmatrix![
            -(1.0 + default_rate_a), 1.0, default_rate_a;
            0.5, -(0.5 + default_rate_b), default_rate_b;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let h = MeasureChangeParams::new(dvector![1.0, 1.0, 1.0]).unwrap();
        let gen_q = apply_exponential_com(&gen_p, &h);
        PhctmcModel::new(scale, schedule, vec![gen_p], vec![gen_q], vec![h]).unwrap()
    }

    #[test]
    fn zero_vol_portfolio_is_constant() {
        let pm = flat_portfolio(2.5e6);
        let paths = simulate_portfolio(&pm, 50, 1).unwrap();
        for p in &paths {
            assert!(p.values.iter().all(|&v| v == 2.5e6));
        }
    }

    #[test]
    fn brownian_variance_matches_permanent_driver() {
        // One permanent driver: Var(V_T) = E[σ²] T = vol_scale² T.
        let pm = PortfolioModel {
            initial_value: 0.0,
            n_flows: 0,
            vol_scale: 10.0,
            maturity: 1.0,
            postings_per_year: 52,
        };
        let n = 20_000;
        let paths = simulate_portfolio(&pm, n, 2024).unwrap();
        let terminal: Vec<f64> = paths.iter().map(|p| *p.values.last().unwrap()).collect();
        let mean = terminal.iter().sum::<f64>() / n as f64;
        let var =
            terminal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        // V_T = σ W_T is a product of independent normals: Var = σ_scale² T.
        let expected = pm.vol_scale * pm.vol_scale * pm.maturity;
        assert!(
            (var / expected - 1.0).abs() < 0.05,
            "terminal variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn collateral_target_examples() {
        let perfect = CollateralAgreement::perfect(7);
        assert_eq!(collateral_target(5.0e6, 0, 0, &perfect), 5.0e6);
        assert_eq!(collateral_target(-3.0e6, 0, 0, &perfect), -3.0e6);

        let uncoll = CollateralAgreement::uncollateralized(7);
        assert_eq!(collateral_target(5.0e6, 0, 0, &uncoll), 0.0);
        assert_eq!(collateral_target(-5.0e6, 3, 4, &uncoll), 0.0);

        // Mid-scale thresholds of 5e6 for both parties.
        let triggers = CollateralAgreement::rating_triggers(
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(collateral_target(7.0e6, 3, 3, &triggers), 2.0e6);
    }

    #[test]
    fn collateral_path_matches_direct_target() {
        let grid: Vec<f64> = (0..=24).map(|j| j as f64 / 24.0).collect();
        let values: Vec<f64> =
            (0..=24).map(|j| 6.0e6 * ((j as f64 / 5.0).sin() + 0.3)).collect();
        let portfolio = PortfolioPath { values };
        let bank = RatingPath {
            initial: 2,
            horizon: 1.0,
            jumps: vec![(0.41, 4), (0.77, 5)],
        };
        let cpty = RatingPath {
            initial: 3,
            horizon: 1.0,
            jumps: vec![(0.33, 5)],
        };
        let agreement = CollateralAgreement::rating_triggers(
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
        )
        .unwrap();
        let collateral =
            collateral_account_path(&portfolio, &bank, &cpty, &agreement, &grid).unwrap();

        assert_eq!(collateral.values[0], 0.0);
        assert_eq!(*collateral.values.last().unwrap(), 0.0);
        for j in 1..grid.len() - 1 {
            let direct = collateral_target(
                portfolio.values[j],
                bank.state_at(grid[j]),
                cpty.state_at(grid[j]),
                &agreement,
            );
            assert!(
                (collateral.values[j] - direct).abs() < 1e-10,
                "recursion diverged from direct target at {j}"
            );
        }
    }

    #[test]
    fn threshold_change_takes_effect_at_next_posting() {
        let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let portfolio = PortfolioPath {
            values: vec![6.0e6; 5],
        };
        // Counterparty drops from a 1e7 threshold to 0 at t = 0.3,
        // between the postings at 0.25 and 0.5.
        let cpty = RatingPath {
            initial: 0,
            horizon: 1.0,
            jumps: vec![(0.3, 5)],
        };
        let bank = RatingPath {
            initial: 0,
            horizon: 1.0,
            jumps: vec![],
        };
        let agreement = CollateralAgreement::rating_triggers(
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
            vec![1e7, 1e7, 1e7, 5e6, 5e6, 0.0, 0.0],
        )
        .unwrap();
        let collateral =
            collateral_account_path(&portfolio, &bank, &cpty, &agreement, &grid).unwrap();
        assert_eq!(collateral.values[1], 0.0, "threshold still 1e7 at t=0.25");
        assert_eq!(collateral.values[2], 6.0e6, "zero threshold binds at t=0.5");
    }

    #[test]
    fn zero_lgd_kills_all_adjustments() {
        let model = three_state_model(0.5, 2.0);
        let pm = PortfolioModel {
            initial_value: 1.0e6,
            n_flows: 2,
            vol_scale: 1.0e6,
            maturity: 1.0,
            postings_per_year: 12,
        };
        let cfg = XvaConfig {
            lgd_bank: 0.0,
            lgd_cpty: 0.0,
            n_paths: 500,
            seed: 9,
            bank_initial: 0,
            cpty_initial: 1,
        };
        let agreement = CollateralAgreement::uncollateralized(3);
        let report = estimate_xva(&model, &pm, &agreement, &cfg).unwrap();
        assert_eq!(report.cdva.value, 0.0);
        assert_eq!(report.ccva.value, 0.0);
        assert_eq!(report.cbva, 0.0);
    }

    #[test]
    fn immediate_counterparty_default_prices_to_lgd_times_value() {
        // Counterparty default intensity so large every path defaults in
        // the first instant while the bank never defaults; constant
        // positive portfolio, no collateral.
        let scale = RatingScale::new(vec!["A".into(), "B".into(), "D".into()]).unwrap();
        let schedule = PiecewiseSchedule::new(vec![0.0, 1.0]).unwrap();
        let gen_p = Generator::try_new(dmatrix![
            0.0, 0.0, 0.0;
            0.0, -1.0e9, 1.0e9;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let h = MeasureChangeParams::identity(3);
        let gen_q = apply_exponential_com(&gen_p, &h);
        let model = PhctmcModel::new(scale, schedule, vec![gen_p], vec![gen_q], vec![h]).unwrap();

        let v0 = 4.2e6;
        let pm = flat_portfolio(v0);
        let cfg = XvaConfig {
            lgd_bank: 0.6,
            lgd_cpty: 0.6,
            n_paths: 200,
            seed: 77,
            bank_initial: 0,
            cpty_initial: 1,
        };
        let agreement = CollateralAgreement::uncollateralized(3);
        let report = estimate_xva(&model, &pm, &agreement, &cfg).unwrap();
        assert_eq!(report.cpty_defaults, 200);
        assert!((report.ccva.value - 0.6 * v0).abs() < 1e-9);
        assert_eq!(report.cdva.value, 0.0);
        assert!((report.cbva + 0.6 * v0).abs() < 1e-9);
    }

    #[test]
    fn regime_ordering_holds_pathwise() {
        let model = three_state_model(0.8, 3.0);
        let pm = PortfolioModel {
            initial_value: 0.0,
            n_flows: 4,
            vol_scale: 4.0e6,
            maturity: 1.0,
            postings_per_year: 52,
        };
        let cfg = XvaConfig {
            lgd_bank: 0.6,
            lgd_cpty: 0.6,
            n_paths: 2_000,
            seed: 314,
            bank_initial: 0,
            cpty_initial: 1,
        };
        let bank_thresholds = vec![4.0e6, 2.0e6, 0.0];
        let cpty_thresholds = vec![4.0e6, 2.0e6, 0.0];

        let scenarios = simulate_scenario_set(&model, &pm, &cfg).unwrap();
        let mut reports = Vec::new();
        for regime in [
            CollateralRegime::Perfect,
            CollateralRegime::RatingTriggers,
            CollateralRegime::Uncollateralized,
        ] {
            let agreement =
                CollateralAgreement::for_regime(regime, &bank_thresholds, &cpty_thresholds)
                    .unwrap();
            reports.push(evaluate_xva(&scenarios, &agreement, &cfg, 2).unwrap());
        }
        let (perfect, triggers, uncoll) = (&reports[0], &reports[1], &reports[2]);
        assert!(perfect.ccva.value <= triggers.ccva.value);
        assert!(triggers.ccva.value <= uncoll.ccva.value);
        assert!(perfect.cdva.value <= triggers.cdva.value);
        assert!(triggers.cdva.value <= uncoll.cdva.value);
        for r in &reports {
            assert_eq!(r.cbva, r.cdva.value - r.ccva.value);
        }
    }

    #[test]
    fn pre_default_histogram_two_state_routes_through_survivor() {
        let scale = RatingScale::new(vec!["A".into(), "D".into()]).unwrap();
        let schedule = PiecewiseSchedule::new(vec![0.0, 1.0]).unwrap();
        let gen = Generator::try_new(dmatrix![-2.0, 2.0; 0.0, 0.0]).unwrap();
        let h = MeasureChangeParams::identity(2);
        let model =
            PhctmcModel::new(scale, schedule, vec![gen.clone()], vec![gen], vec![h]).unwrap();
        let blocks =
            crate::simulation::simulate_rating_blocks(&model, Measure::Historical, 400, 5)
                .unwrap();
        let hist = pre_default_distribution(&blocks, 1).unwrap();
        // Every defaulted path came from the only non-default state.
        assert!(hist[(0, 0)] > 0.5);
        assert_eq!(hist[(0, 1)], 0.0);
        // Starters in the absorbing state never contribute.
        assert_eq!(hist[(1, 0)], 0.0);
        assert_eq!(hist[(1, 1)], 0.0);
    }
}
