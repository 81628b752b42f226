//! Building the piecewise-homogeneous rating model under both measures:
//! withdrawal adjustment, generator extraction, the penalized
//! change-of-measure calibration and the diagonal-scaling baseline.
//!
//! The pipeline per interval `[T_{k-1}, T_k)`:
//!
//! 1. redistribute withdrawal mass so every row of the published matrix
//!    sums to one ([`adjust_matrix`]),
//! 2. peel off the historical generator via the accumulated evolution
//!    system and the matrix logarithm ([`extract_piecewise_generators`]),
//! 3. jointly fit per-interval measure-change factors `h` and a candidate
//!    generator `A` so that the risk-neutral default column matches the
//!    market curve while `A` stays close to the historical generator
//!    ([`calibrate_piecewise`]).
//!
//! The risk-neutral generator is the exponential change of measure of the
//! historical one: off-diagonal `(i,j)` intensities pick up a factor
//! `h_j / h_i` ([`apply_exponential_com`]). The diagonal-scaling baseline
//! ([`calibrate_jlt`]) instead multiplies row `i` by a non-negative factor
//! and is calibrated to the one-year default column alone.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::{expm, logm, repair_generator, SquareMatrix};
use crate::optim::{minimize_bounded, LmOptions};
use crate::rating::{
    DefaultCurve, Generator, MatrixKind, PiecewiseSchedule, RatingScale, TransitionMatrix,
    TENOR_TOL,
};

/// Floor applied to zero entries before withdrawal mass is redistributed,
/// so no transition probability is exactly zero afterwards.
const WITHDRAWAL_FLOOR: f64 = 1e-10;

/// Objective level at which an interval fit stops polishing: every
/// weighted residual is below ~3e-6 there, three orders inside the
/// tightest tolerance asserted on the fit.
const PIECEWISE_OBJECTIVE_FLOOR: f64 = 1e-11;

/// Objective floor for the diagonal-scaling baseline, tuned so the
/// reported per-rating residual lands an order below 1e-8.
const JLT_OBJECTIVE_FLOOR: f64 = 5e-17;

/// Box for the measure-change factors in the penalized fit. The joint
/// objective admits a degenerate minimum in which microscopic generator
/// bumps are amplified by extreme factor ratios; it matches the default
/// column of the current interval but wrecks the feasibility of later
/// tenors. Capping the factors two orders of magnitude either way keeps
/// the fit in the moderate family (observed factor spreads stay within
/// ~1e-2..1.5) without binding the ratings whose risk premium is real.
const H_BOUNDS_PENALIZED: (f64, f64) = (1e-2, 1e2);

/// Box for the pinned-generator mode, where extreme factors are the
/// expected outcome rather than an artifact.
const H_BOUNDS_PINNED: (f64, f64) = (1e-6, 1e6);

/// Per-interval measure-change factors, one strictly positive scalar per
/// rating with the default-state entry pinned to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureChangeParams {
    h: DVector<f64>,
}

impl MeasureChangeParams {
    pub fn new(h: DVector<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::Invariant("empty measure-change vector".into()));
        }
        for (i, &v) in h.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invariant(format!(
                    "measure-change factor {i} must be strictly positive, got {v}"
                )));
            }
        }
        let last = h.len() - 1;
        if (h[last] - 1.0).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "default-state factor must be 1, got {}",
                h[last]
            )));
        }
        let mut h = h;
        h[last] = 1.0;
        Ok(Self { h })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            h: DVector::from_element(dim, 1.0),
        }
    }

    pub fn factors(&self) -> &DVector<f64> {
        &self.h
    }

    /// Element-wise reciprocal; inverts the change of measure.
    pub fn reciprocal(&self) -> Result<Self> {
        Self::new(self.h.map(|v| 1.0 / v))
    }
}

/// Weights of the two penalty terms: a matrix weight on the generator
/// mismatch and a vector weight on the default-probability mismatch.
#[derive(Debug, Clone)]
pub struct CalibrationWeights {
    pub p_weight: PWeight,
    pub q_weight: DVector<f64>,
}

/// Generator-penalty weight. `Infinite` is the sentinel for full trust in
/// the historical generator: it is pinned and only the measure change is
/// fitted.
#[derive(Debug, Clone)]
pub enum PWeight {
    Matrix(SquareMatrix),
    Infinite,
}

impl CalibrationWeights {
    /// Unit weights on both terms.
    pub fn unit(dim: usize) -> Self {
        Self {
            p_weight: PWeight::Matrix(SquareMatrix::from_element(dim, dim, 1.0)),
            q_weight: DVector::from_element(dim, 1.0),
        }
    }

    /// Pin the historical generator; fit the default curve alone.
    pub fn pinned_generator(dim: usize) -> Self {
        Self {
            p_weight: PWeight::Infinite,
            q_weight: DVector::from_element(dim, 1.0),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let PWeight::Matrix(m) = &self.p_weight {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Dimension("p-weight matrix dimension mismatch".into()));
            }
            if m.iter().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(Error::Invariant("p-weights must be finite and non-negative".into()));
            }
        }
        if self.q_weight.len() != dim {
            return Err(Error::Dimension("q-weight vector dimension mismatch".into()));
        }
        if self.q_weight.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Invariant("q-weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The calibrated piecewise-homogeneous model: one generator per interval
/// under each measure, linked by the measure-change factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhctmcModel {
    pub scale: RatingScale,
    pub schedule: PiecewiseSchedule,
    gen_p: Vec<Generator>,
    gen_q: Vec<Generator>,
    h: Vec<MeasureChangeParams>,
}

/// Measure selector for model evaluation and simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Historical measure (P).
    Historical,
    /// Risk-neutral measure (Q).
    RiskNeutral,
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" | "historical" => Ok(Measure::Historical),
            "Q" | "q" | "risk-neutral" => Ok(Measure::RiskNeutral),
            other => Err(Error::Config(format!("unknown measure '{other}', expected P or Q"))),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Measure::Historical => write!(f, "P"),
            Measure::RiskNeutral => write!(f, "Q"),
        }
    }
}

impl PhctmcModel {
    pub fn new(
        scale: RatingScale,
        schedule: PiecewiseSchedule,
        gen_p: Vec<Generator>,
        gen_q: Vec<Generator>,
        h: Vec<MeasureChangeParams>,
    ) -> Result<Self> {
        let model = Self {
            scale,
            schedule,
            gen_p,
            gen_q,
            h,
        };
        model.validate()?;
        Ok(model)
    }

    /// Structural checks: one generator pair and one factor vector per
    /// interval, all of scale dimension, with the risk-neutral
    /// off-diagonals equal to the historical ones times `h_j / h_i`.
    pub fn validate(&self) -> Result<()> {
        let n = self.schedule.n_intervals();
        let k = self.scale.len();
        if self.gen_p.len() != n || self.gen_q.len() != n || self.h.len() != n {
            return Err(Error::Dimension(format!(
                "model has {} intervals but {}/{}/{} generator/factor sets",
                n,
                self.gen_p.len(),
                self.gen_q.len(),
                self.h.len()
            )));
        }
        for idx in 0..n {
            if self.gen_p[idx].dim() != k || self.gen_q[idx].dim() != k {
                return Err(Error::Dimension(format!("interval {idx}: generator dimension != {k}")));
            }
            if self.h[idx].factors().len() != k {
                return Err(Error::Dimension(format!("interval {idx}: factor dimension != {k}")));
            }
            let p = self.gen_p[idx].entries();
            let q = self.gen_q[idx].entries();
            let h = self.h[idx].factors();
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let expected = p[(i, j)] * h[j] / h[i];
                    let scale_ref = expected.abs().max(1.0);
                    if (q[(i, j)] - expected).abs() > 1e-8 * scale_ref {
                        return Err(Error::Invariant(format!(
                            "interval {idx}: risk-neutral intensity ({i},{j}) inconsistent with measure change"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_intervals(&self) -> usize {
        self.schedule.n_intervals()
    }

    pub fn generators(&self, measure: Measure) -> &[Generator] {
        match measure {
            Measure::Historical => &self.gen_p,
            Measure::RiskNeutral => &self.gen_q,
        }
    }

    pub fn measure_change(&self) -> &[MeasureChangeParams] {
        &self.h
    }

    /// Evolution system P(s, t) under the chosen measure.
    pub fn transition(&self, measure: Measure, s: f64, t: f64) -> Result<SquareMatrix> {
        evolution_system(self.generators(measure), &self.schedule, s, t)
    }

    /// Cumulative default probability per initial rating at time t.
    pub fn default_probabilities(&self, measure: Measure, t: f64) -> Result<DVector<f64>> {
        let evo = self.transition(measure, 0.0, t)?;
        Ok(evo.column(self.scale.default_index()).into_owned())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("model serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let model: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

/// Row scales of the diagonal-scaling (risk-premium) change of measure,
/// together with the homogeneous generator they apply to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JltParams {
    /// One non-negative factor per non-default rating.
    pub row_scales: Vec<f64>,
    /// Homogeneous historical generator the scales act on.
    pub generator: Generator,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Withdrawal adjustment: redistributes the missing row mass
/// proportionally to the floored row weights, so every row sums to one.
pub fn adjust_matrix(m: &TransitionMatrix) -> Result<TransitionMatrix> {
    if m.kind != MatrixKind::Market {
        return Err(Error::Invariant("adjust_matrix expects a market-kind matrix".into()));
    }
    let k = m.dim();
    let mut out = m.entries().clone();
    for i in 0..k {
        let row_sum: f64 = out.row(i).sum();
        let withdrawal = 1.0 - row_sum;
        if withdrawal <= 0.0 {
            continue;
        }
        if row_sum == 0.0 {
            return Err(Error::Invariant(format!(
                "row {i} sums to 0: full withdrawal cannot be redistributed"
            )));
        }
        let mut floored = DVector::zeros(k);
        for j in 0..k {
            let v = out[(i, j)];
            floored[j] = if v == 0.0 { WITHDRAWAL_FLOOR } else { v };
        }
        let floored_sum: f64 = floored.sum();
        for j in 0..k {
            out[(i, j)] += floored[j] / floored_sum * withdrawal;
        }
        let new_sum: f64 = out.row(i).sum();
        debug_assert!((new_sum - 1.0).abs() < 1e-14);
        for j in 0..k {
            out[(i, j)] /= new_sum;
        }
    }
    TransitionMatrix::new(m.horizon, MatrixKind::Adjusted, out)
}

/// Historical generator of a single adjusted matrix: principal logarithm
/// scaled by the horizon, then repaired to a valid generator.
pub fn extract_generator(r: &TransitionMatrix) -> Result<Generator> {
    if r.kind != MatrixKind::Adjusted {
        return Err(Error::Invariant("extract_generator expects an adjusted matrix".into()));
    }
    let log = logm(r.entries())?;
    let mut repaired = repair_generator(&(log / r.horizon));
    zero_default_row(&mut repaired);
    Generator::try_new(repaired)
}

fn zero_default_row(m: &mut SquareMatrix) {
    let last = m.nrows() - 1;
    for j in 0..m.ncols() {
        m[(last, j)] = 0.0;
    }
}

/// Per-interval historical generators from the matrices observed at the
/// breakpoints: each interval's generator is the repaired logarithm of
/// the quotient against the evolution system accumulated so far.
pub fn extract_piecewise_generators(
    matrices: &[TransitionMatrix],
    schedule: &PiecewiseSchedule,
) -> Result<Vec<Generator>> {
    let n = schedule.n_intervals();
    if matrices.len() != n {
        return Err(Error::Dimension(format!(
            "{} matrices for {} intervals",
            matrices.len(),
            n
        )));
    }
    let k = matrices[0].dim();
    let mut generators = Vec::with_capacity(n);
    let mut accumulated = SquareMatrix::identity(k, k);
    for (idx, m) in matrices.iter().enumerate() {
        if m.kind != MatrixKind::Adjusted {
            return Err(Error::Extraction {
                interval: idx,
                message: "matrix is not withdrawal-adjusted".into(),
            });
        }
        if (m.horizon - schedule.breakpoints()[idx + 1]).abs() > TENOR_TOL {
            return Err(Error::Extraction {
                interval: idx,
                message: format!(
                    "matrix horizon {} does not match breakpoint {}",
                    m.horizon,
                    schedule.breakpoints()[idx + 1]
                ),
            });
        }
        let quotient = accumulated
            .clone()
            .lu()
            .solve(m.entries())
            .ok_or_else(|| Error::Extraction {
                interval: idx,
                message: "accumulated evolution system is singular".into(),
            })?;
        let dt = schedule.interval_length(idx);
        let log = logm(&quotient).map_err(|e| Error::Extraction {
            interval: idx,
            message: e.to_string(),
        })?;
        let mut repaired = repair_generator(&(log / dt));
        zero_default_row(&mut repaired);
        let generator = Generator::try_new(repaired)?;
        accumulated *= expm(&(generator.entries() * dt))?;
        generators.push(generator);
    }
    Ok(generators)
}

/// Evolution system P(s, t): ordered product of interval matrix
/// exponentials with partial intervals at both ends.
pub fn evolution_system(
    generators: &[Generator],
    schedule: &PiecewiseSchedule,
    s: f64,
    t: f64,
) -> Result<SquareMatrix> {
    if generators.len() != schedule.n_intervals() {
        return Err(Error::Dimension(format!(
            "{} generators for {} intervals",
            generators.len(),
            schedule.n_intervals()
        )));
    }
    if s < -TENOR_TOL || t > schedule.horizon() + TENOR_TOL || s > t + TENOR_TOL {
        return Err(Error::Invariant(format!(
            "evolution times ({s}, {t}) outside schedule span [0, {}]",
            schedule.horizon()
        )));
    }
    let k = generators[0].dim();
    let mut result = SquareMatrix::identity(k, k);
    let mut cursor = s.max(0.0);
    let t = t.min(schedule.horizon());
    while cursor < t - TENOR_TOL {
        let interval = schedule
            .interval_of(cursor)
            .expect("cursor stays inside the schedule");
        let segment_end = schedule.breakpoints()[interval + 1].min(t);
        let dt = segment_end - cursor;
        if dt > 0.0 {
            result *= expm(&(generators[interval].entries() * dt))?;
        }
        cursor = segment_end;
    }
    Ok(result)
}

/// Exponential change of measure: off-diagonal `(i,j)` intensities are
/// scaled by `h_j / h_i`, diagonals rewritten to keep zero row sums.
pub fn apply_exponential_com(g: &Generator, h: &MeasureChangeParams) -> Generator {
    let factors = h.factors();
    let transformed = com_matrix(g.entries(), factors);
    Generator::try_new(transformed).expect("change of measure preserves generator validity")
}

/// The same transformation on a raw candidate matrix (used inside the
/// calibration objective before the candidate is repaired).
fn com_matrix(a: &SquareMatrix, factors: &DVector<f64>) -> SquareMatrix {
    let k = a.nrows();
    let mut out = SquareMatrix::zeros(k, k);
    for i in 0..k {
        let mut row_sum = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let v = a[(i, j)] * factors[j] / factors[i];
            out[(i, j)] = v;
            row_sum += v;
        }
        out[(i, i)] = -row_sum;
    }
    out
}

/// Diagonal-scaling change of measure: row `i` of the generator is
/// multiplied by its non-negative factor, the default row is untouched.
pub fn apply_jlt_com(g: &Generator, params: &JltParams) -> Result<Generator> {
    let k = g.dim();
    if params.row_scales.len() != k - 1 {
        return Err(Error::Dimension(format!(
            "{} row scales for {} non-default ratings",
            params.row_scales.len(),
            k - 1
        )));
    }
    let mut out = g.entries().clone();
    for (i, &scale) in params.row_scales.iter().enumerate() {
        if !(scale >= 0.0) {
            return Err(Error::Invariant(format!("row scale {i} must be non-negative")));
        }
        for j in 0..k {
            out[(i, j)] *= scale;
        }
    }
    Generator::try_new(out)
}

// ---------------------------------------------------------------------------
// Penalized piecewise calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub lm: LmOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        // Conservative initial damping keeps the first steps short, so the
        // fit refines the nearest minimum around h = 1, A = Λ instead of
        // jumping into an extreme-h basin with the same objective value.
        let lm = LmOptions {
            initial_damping: 1e3,
            ..LmOptions::default()
        };
        Self { lm }
    }
}

/// Per-interval calibration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalReport {
    pub interval: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Squared weighted residual norm at the optimum.
    pub objective: f64,
    pub iterations: usize,
    /// (1/K) ‖model PD − market PD‖₂ at the interval end.
    pub pd_residual: f64,
    /// Largest absolute PD mismatch at the interval end.
    pub pd_residual_max: f64,
    /// (1/K²) ‖model P-transition − adjusted matrix‖_F at the interval end.
    pub p_residual: f64,
    /// Mean absolute entry error of the same comparison.
    pub p_residual_mae: f64,
    /// Mean absolute change of the repair step applied to the calibrated
    /// candidate generator.
    pub repair_residual: f64,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub intervals: Vec<IntervalReport>,
}

impl CalibrationReport {
    pub fn total_repair_residual(&self) -> f64 {
        let n = self.intervals.len().max(1);
        self.intervals.iter().map(|r| r.repair_residual).sum::<f64>() / n as f64
    }
}

struct IntervalParametrization {
    dim: usize,
    pinned: Option<SquareMatrix>,
}

impl IntervalParametrization {
    fn n_params(&self) -> usize {
        let k = self.dim;
        match self.pinned {
            Some(_) => k - 1,
            None => (k - 1) + (k - 1) * k,
        }
    }

    fn unpack(&self, x: &DVector<f64>) -> (DVector<f64>, SquareMatrix) {
        let k = self.dim;
        let mut factors = DVector::from_element(k, 1.0);
        for i in 0..k - 1 {
            factors[i] = x[i];
        }
        let candidate = match &self.pinned {
            Some(pinned) => pinned.clone(),
            None => {
                let mut a = SquareMatrix::zeros(k, k);
                for i in 0..k - 1 {
                    for j in 0..k {
                        a[(i, j)] = x[(k - 1) + i * k + j];
                    }
                }
                a
            }
        };
        (factors, candidate)
    }

    fn initial(&self, reference: &SquareMatrix) -> DVector<f64> {
        let k = self.dim;
        let mut x = DVector::from_element(self.n_params(), 1.0);
        if self.pinned.is_none() {
            for i in 0..k - 1 {
                for j in 0..k {
                    x[(k - 1) + i * k + j] = reference[(i, j)];
                }
            }
        }
        x
    }

    fn bounds(&self, intensity_cap: f64) -> (DVector<f64>, DVector<f64>) {
        let k = self.dim;
        let n = self.n_params();
        let (h_lo, h_hi) = if self.pinned.is_some() {
            H_BOUNDS_PINNED
        } else {
            H_BOUNDS_PENALIZED
        };
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        for i in 0..k - 1 {
            lower[i] = h_lo;
            upper[i] = h_hi;
        }
        if self.pinned.is_none() {
            for i in 0..k - 1 {
                for j in 0..k {
                    let idx = (k - 1) + i * k + j;
                    if i == j {
                        lower[idx] = -intensity_cap * k as f64;
                        upper[idx] = 0.0;
                    } else {
                        lower[idx] = 0.0;
                        upper[idx] = intensity_cap;
                    }
                }
            }
        }
        (lower, upper)
    }
}

/// Joint per-interval calibration of the measure-change factors and the
/// historical generator, penalized towards the extracted generator.
///
/// Proceeds interval by interval: the risk-neutral evolution system
/// accumulated from earlier intervals premultiplies the candidate
/// interval exponential before its default column is compared with the
/// market curve. After each fit the candidate is repaired to a valid
/// generator; the repair magnitude is reported.
pub fn calibrate_piecewise(
    adjusted: &[TransitionMatrix],
    curve: &DefaultCurve,
    schedule: &PiecewiseSchedule,
    weights: &CalibrationWeights,
    options: &CalibrationOptions,
    scale: &RatingScale,
) -> Result<(PhctmcModel, CalibrationReport)> {
    let k = scale.len();
    weights.validate(k)?;
    if curve.dim() != k {
        return Err(Error::Dimension("default curve dimension mismatch".into()));
    }
    if curve.tenors().len() != schedule.n_intervals() {
        return Err(Error::Dimension(format!(
            "{} curve tenors vs {} schedule intervals",
            curve.tenors().len(),
            schedule.n_intervals()
        )));
    }
    for (idx, (&tenor, &bp)) in curve
        .tenors()
        .iter()
        .zip(&schedule.breakpoints()[1..])
        .enumerate()
    {
        if (tenor - bp).abs() > TENOR_TOL {
            return Err(Error::Dimension(format!(
                "curve tenor {tenor} does not match breakpoint {bp} at index {idx}"
            )));
        }
    }

    let historical = extract_piecewise_generators(adjusted, schedule)?;

    let mut lm_options = options.lm.clone();
    if lm_options.objective_floor == 0.0 {
        lm_options.objective_floor = PIECEWISE_OBJECTIVE_FLOOR;
    }

    let n = schedule.n_intervals();
    let mut gen_p = Vec::with_capacity(n);
    let mut gen_q = Vec::with_capacity(n);
    let mut h_all = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    let mut evo_q = SquareMatrix::identity(k, k);
    let mut evo_p = SquareMatrix::identity(k, k);
    let default_col = scale.default_index();

    for interval in 0..n {
        let dt = schedule.interval_length(interval);
        let reference = historical[interval].entries().clone();
        let pd_target = curve.pd_at(interval).clone();
        let intensity_cap = 10.0 * reference.iter().fold(1.0f64, |m, x| m.max(x.abs()));

        let parametrization = IntervalParametrization {
            dim: k,
            pinned: match &weights.p_weight {
                PWeight::Infinite => Some(reference.clone()),
                PWeight::Matrix(_) => None,
            },
        };
        let (lower, upper) = parametrization.bounds(intensity_cap);
        let x0 = parametrization.initial(&reference);

        let q_weight = weights.q_weight.clone();
        let p_weight = match &weights.p_weight {
            PWeight::Matrix(m) => Some(m.clone()),
            PWeight::Infinite => None,
        };
        let evo_q_fixed = evo_q.clone();
        let reference_for_residual = reference.clone();
        let pd_target_fit = pd_target.clone();
        let residuals = move |x: &DVector<f64>| {
            let (factors, candidate) = parametrization_unpack(&parametrization, x);
            let transformed = com_matrix(&candidate, &factors);
            let n_q = q_weight.len();
            let n_p = if p_weight.is_some() { n_q * n_q } else { 0 };
            let mut r = DVector::zeros(n_q + n_p);
            match expm(&(transformed * dt)) {
                Ok(step) => {
                    let model_pd = &evo_q_fixed * step.column(default_col);
                    for i in 0..n_q {
                        r[i] = q_weight[i] * (model_pd[i] - pd_target_fit[i]);
                    }
                }
                Err(_) => {
                    // Barrier: an exploding candidate is rejected by cost.
                    for i in 0..n_q {
                        r[i] = 1e100;
                    }
                }
            }
            if let Some(mp) = &p_weight {
                for i in 0..n_q {
                    for j in 0..n_q {
                        r[n_q + i * n_q + j] =
                            mp[(i, j)] * (candidate[(i, j)] - reference_for_residual[(i, j)]);
                    }
                }
            }
            r
        };

        let outcome =
            minimize_bounded(residuals, &x0, &lower, &upper, &lm_options).map_err(|e| match e {
                Error::NonConvergence { iterations, objective } => Error::Calibration {
                    interval,
                    message: format!("optimizer stopped after {iterations} iterations"),
                    objective,
                },
                other => other,
            })?;

        let parametrization = IntervalParametrization {
            dim: k,
            pinned: match &weights.p_weight {
                PWeight::Infinite => Some(reference.clone()),
                PWeight::Matrix(_) => None,
            },
        };
        let (factors, candidate) = parametrization.unpack(&outcome.x);
        let mut repaired = repair_generator(&candidate);
        zero_default_row(&mut repaired);
        let repair_residual =
            (&repaired - &candidate).iter().map(|x| x.abs()).sum::<f64>() / (k * k) as f64;

        let generator_p = Generator::try_new(repaired)?;
        let h = MeasureChangeParams::new(factors)?;
        let generator_q = apply_exponential_com(&generator_p, &h);

        evo_q *= expm(&(generator_q.entries() * dt))?;
        evo_p *= expm(&(generator_p.entries() * dt))?;

        let model_pd = evo_q.column(default_col);
        let pd_diff = &model_pd - &pd_target;
        let pd_residual = pd_diff.norm() / k as f64;
        let pd_residual_max = pd_diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let p_diff = &evo_p - adjusted[interval].entries();
        let p_residual = p_diff.norm() / (k * k) as f64;
        let p_residual_mae = p_diff.iter().map(|x| x.abs()).sum::<f64>() / (k * k) as f64;

        reports.push(IntervalReport {
            interval,
            t_start: schedule.breakpoints()[interval],
            t_end: schedule.breakpoints()[interval + 1],
            objective: outcome.objective,
            iterations: outcome.iterations,
            pd_residual,
            pd_residual_max,
            p_residual,
            p_residual_mae,
            repair_residual,
            h: h.factors().iter().copied().collect(),
        });
        gen_p.push(generator_p);
        gen_q.push(generator_q);
        h_all.push(h);
    }

    let model = PhctmcModel::new(scale.clone(), schedule.clone(), gen_p, gen_q, h_all)?;
    Ok((model, CalibrationReport { intervals: reports }))
}

// Standalone so the closure can own its copy of the parametrization.
fn parametrization_unpack(
    p: &IntervalParametrization,
    x: &DVector<f64>,
) -> (DVector<f64>, SquareMatrix) {
    p.unpack(x)
}

/// Outcome of the diagonal-scaling baseline calibration.
#[derive(Debug, Clone)]
pub struct JltOutcome {
    pub params: JltParams,
    /// (1/K) ‖model PD − market PD‖₂ at the calibration tenor.
    pub residual: f64,
    /// Risk-neutral one-period transition matrix implied by the fit.
    pub q_matrix: SquareMatrix,
}

/// Fit the row scales of the diagonal-scaling change of measure to the
/// default column at a single tenor (the homogeneous baseline).
pub fn calibrate_jlt(
    generator: &Generator,
    pd_target: &DVector<f64>,
    horizon: f64,
    options: &CalibrationOptions,
) -> Result<JltOutcome> {
    let k = generator.dim();
    if pd_target.len() != k {
        return Err(Error::Dimension("pd target dimension mismatch".into()));
    }
    let base = generator.entries().clone();
    let default_col = k - 1;
    let pd = pd_target.clone();
    let residuals = move |x: &DVector<f64>| {
        let mut scaled = base.clone();
        for i in 0..k - 1 {
            for j in 0..k {
                scaled[(i, j)] *= x[i];
            }
        }
        match expm(&(scaled * horizon)) {
            Ok(m) => {
                DVector::from_iterator(k, (0..k).map(|i| m[(i, default_col)] - pd[i]))
            }
            Err(_) => DVector::from_element(k, 1e100),
        }
    };
    let x0 = DVector::from_element(k - 1, 1.0);
    let lower = DVector::from_element(k - 1, 0.0);
    let upper = DVector::from_element(k - 1, 1e6);
    let mut lm_options = options.lm.clone();
    if lm_options.objective_floor == 0.0 {
        lm_options.objective_floor = JLT_OBJECTIVE_FLOOR;
    }
    let outcome = minimize_bounded(residuals, &x0, &lower, &upper, &lm_options)?;

    let params = JltParams {
        row_scales: outcome.x.iter().copied().collect(),
        generator: generator.clone(),
    };
    let q_generator = apply_jlt_com(generator, &params)?;
    let q_matrix = expm(&(q_generator.entries() * horizon))?;
    let residual = (0..k)
        .map(|i| (q_matrix[(i, default_col)] - pd_target[i]).powi(2))
        .sum::<f64>()
        .sqrt()
        / k as f64;
    Ok(JltOutcome {
        params,
        residual,
        q_matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn two_state_scale() -> RatingScale {
        RatingScale::new(vec!["A".into(), "D".into()]).unwrap()
    }

    fn max_abs(m: &SquareMatrix) -> f64 {
        m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn adjust_redistributes_proportionally() {
        // Leading row of the bundled one-month data, worked by hand.
        let row = [0.98840, 0.00610, 0.00020, 0.0, 0.0, 0.0, 0.0];
        let mut entries = SquareMatrix::identity(7, 7);
        for (j, &v) in row.iter().enumerate() {
            entries[(0, j)] = v;
        }
        let m = TransitionMatrix::new(1.0 / 12.0, MatrixKind::Market, entries).unwrap();
        let adjusted = adjust_matrix(&m).unwrap();

        let row_sum: f64 = adjusted.entries().row(0).sum();
        assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-14);

        let withdrawal = 1.0 - row.iter().sum::<f64>();
        let floored: Vec<f64> = row.iter().map(|&v| if v == 0.0 { 1e-10 } else { v }).collect();
        let floored_sum: f64 = floored.iter().sum();
        for j in 0..7 {
            let expected = row[j] + floored[j] / floored_sum * withdrawal;
            assert_abs_diff_eq!(adjusted.entries()[(0, j)], expected, epsilon = 1e-13);
        }
        assert!((adjusted.entries()[(0, 0)] - 0.993667).abs() < 1e-6);
        assert!((adjusted.entries()[(0, 1)] - 0.006133).abs() < 1e-6);
        assert!((adjusted.entries()[(0, 2)] - 0.000201).abs() < 1e-6);
        assert!(adjusted.entries()[(0, 4)] > 0.0 && adjusted.entries()[(0, 4)] < 1e-10);
    }

    #[test]
    fn adjust_preserves_ratios_of_positive_entries() {
        let entries = dmatrix![
            0.5, 0.3, 0.1;
            0.0, 0.85, 0.05;
            0.0, 0.0, 1.0
        ];
        let m = TransitionMatrix::new(0.25, MatrixKind::Market, entries).unwrap();
        let adjusted = adjust_matrix(&m).unwrap();
        let before = 0.5 / 0.3;
        let after = adjusted.entries()[(0, 0)] / adjusted.entries()[(0, 1)];
        assert_abs_diff_eq!(before, after, epsilon = 1e-9);
    }

    #[test]
    fn adjust_passes_full_rows_through() {
        // Entries chosen to sum to exactly 1.0 in binary64.
        let entries = dmatrix![
            0.5, 0.25, 0.25;
            0.125, 0.75, 0.125;
            0.0, 0.0, 1.0
        ];
        let m = TransitionMatrix::new(1.0, MatrixKind::Market, entries.clone()).unwrap();
        let adjusted = adjust_matrix(&m).unwrap();
        assert_eq!(max_abs(&(adjusted.entries() - &entries)), 0.0);
    }

    #[test]
    fn adjust_rejects_zero_rows() {
        let entries = dmatrix![
            0.0, 0.0, 0.0;
            0.1, 0.8, 0.1;
            0.0, 0.0, 1.0
        ];
        let m = TransitionMatrix::new(1.0, MatrixKind::Market, entries).unwrap();
        assert!(adjust_matrix(&m).is_err());
    }

    #[test]
    fn extract_generator_of_identity_is_zero() {
        let m = TransitionMatrix::new(1.0, MatrixKind::Adjusted, SquareMatrix::identity(3, 3))
            .unwrap();
        let g = extract_generator(&m).unwrap();
        assert!(max_abs(g.entries()) < 1e-12);
    }

    #[test]
    fn extract_generator_round_trip() {
        let g = dmatrix![
            -0.40, 0.30, 0.10;
            0.05, -0.25, 0.20;
            0.0, 0.0, 0.0
        ];
        let t = 0.5;
        let m = TransitionMatrix::new(t, MatrixKind::Adjusted, expm(&(&g * t)).unwrap()).unwrap();
        let back = extract_generator(&m).unwrap();
        assert!(max_abs(&(back.entries() - &g)) < 1e-9);
    }

    #[test]
    fn piecewise_extraction_recovers_synthetic_generators() {
        let g1 = dmatrix![
            -0.8, 0.6, 0.2;
            0.1, -0.4, 0.3;
            0.0, 0.0, 0.0
        ];
        let g2 = dmatrix![
            -0.3, 0.25, 0.05;
            0.30, -0.9, 0.6;
            0.0, 0.0, 0.0
        ];
        let schedule = PiecewiseSchedule::new(vec![0.0, 0.5, 1.0]).unwrap();
        let m1 = expm(&(&g1 * 0.5)).unwrap();
        let m2 = &m1 * expm(&(&g2 * 0.5)).unwrap();
        let matrices = vec![
            TransitionMatrix::new(0.5, MatrixKind::Adjusted, m1).unwrap(),
            TransitionMatrix::new(1.0, MatrixKind::Adjusted, m2).unwrap(),
        ];
        let gens = extract_piecewise_generators(&matrices, &schedule).unwrap();
        assert!(max_abs(&(gens[0].entries() - &g1)) < 1e-8);
        assert!(max_abs(&(gens[1].entries() - &g2)) < 1e-8);
    }

    #[test]
    fn evolution_system_identity_and_chapman_kolmogorov() {
        let g1 = Generator::try_new(dmatrix![
            -0.8, 0.6, 0.2;
            0.1, -0.4, 0.3;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let g2 = Generator::try_new(dmatrix![
            -0.3, 0.25, 0.05;
            0.30, -0.9, 0.6;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let schedule = PiecewiseSchedule::new(vec![0.0, 1.0 / 12.0, 1.0]).unwrap();
        let gens = vec![g1.clone(), g2];

        let same = evolution_system(&gens, &schedule, 0.3, 0.3).unwrap();
        assert!(max_abs(&(&same - &SquareMatrix::identity(3, 3))) < 1e-15);

        let inside = evolution_system(&gens, &schedule, 0.01, 0.05).unwrap();
        let direct = expm(&(g1.entries() * 0.04)).unwrap();
        assert!(max_abs(&(&inside - &direct)) < 1e-12);

        let left = evolution_system(&gens, &schedule, 0.0, 1.0 / 12.0).unwrap();
        let right = evolution_system(&gens, &schedule, 1.0 / 12.0, 1.0).unwrap();
        let full = evolution_system(&gens, &schedule, 0.0, 1.0).unwrap();
        assert!(max_abs(&(left * right - full)) < 1e-12);

        assert!(evolution_system(&gens, &schedule, 0.0, 2.0).is_err());
    }

    #[test]
    fn exponential_com_examples() {
        let g = Generator::try_new(dmatrix![-1.0, 1.0; 0.0, 0.0]).unwrap();

        let unit = MeasureChangeParams::identity(2);
        let unchanged = apply_exponential_com(&g, &unit);
        assert_eq!(max_abs(&(unchanged.entries() - g.entries())), 0.0);

        let h = MeasureChangeParams::new(dvector![2.0, 1.0]).unwrap();
        let q = apply_exponential_com(&g, &h);
        assert!(max_abs(&(q.entries() - &dmatrix![-0.5, 0.5; 0.0, 0.0])) < 1e-15);
    }

    #[test]
    fn exponential_com_is_involutive() {
        let g = Generator::try_new(dmatrix![
            -0.7, 0.4, 0.3;
            0.2, -0.5, 0.3;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let h = MeasureChangeParams::new(dvector![2.5, 0.4, 1.0]).unwrap();
        let forward = apply_exponential_com(&g, &h);
        let back = apply_exponential_com(&forward, &h.reciprocal().unwrap());
        assert!(max_abs(&(back.entries() - g.entries())) < 1e-15);
    }

    #[test]
    fn jlt_com_examples() {
        let g = Generator::try_new(dmatrix![-1.0, 1.0; 0.0, 0.0]).unwrap();
        let unit = JltParams {
            row_scales: vec![1.0],
            generator: g.clone(),
        };
        assert_eq!(max_abs(&(apply_jlt_com(&g, &unit).unwrap().entries() - g.entries())), 0.0);

        let double = JltParams {
            row_scales: vec![2.0],
            generator: g.clone(),
        };
        let scaled = apply_jlt_com(&g, &double).unwrap();
        assert!(max_abs(&(scaled.entries() - &dmatrix![-2.0, 2.0; 0.0, 0.0])) < 1e-15);
        assert_abs_diff_eq!(scaled.entries().row(0).sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn calibration_fixed_point_on_self_consistent_curve() {
        // Model-implied curve under h = 1 must calibrate back to itself.
        let g1 = dmatrix![
            -0.5, 0.4, 0.1;
            0.2, -0.5, 0.3;
            0.0, 0.0, 0.0
        ];
        let g2 = dmatrix![
            -0.9, 0.7, 0.2;
            0.1, -0.3, 0.2;
            0.0, 0.0, 0.0
        ];
        let schedule = PiecewiseSchedule::new(vec![0.0, 0.5, 1.0]).unwrap();
        let m1 = expm(&(&g1 * 0.5)).unwrap();
        let m2 = &m1 * expm(&(&g2 * 0.5)).unwrap();
        let curve = DefaultCurve::new(
            vec![0.5, 1.0],
            vec![m1.column(2).into_owned(), m2.column(2).into_owned()],
        )
        .unwrap();
        let adjusted = vec![
            TransitionMatrix::new(0.5, MatrixKind::Adjusted, m1).unwrap(),
            TransitionMatrix::new(1.0, MatrixKind::Adjusted, m2).unwrap(),
        ];
        let scale = RatingScale::new(vec!["A".into(), "B".into(), "D".into()]).unwrap();
        let weights = CalibrationWeights::unit(3);
        let (model, report) = calibrate_piecewise(
            &adjusted,
            &curve,
            &schedule,
            &weights,
            &CalibrationOptions::default(),
            &scale,
        )
        .unwrap();

        for r in &report.intervals {
            assert!(r.objective < 1e-10, "objective {} too large", r.objective);
            for &h in &r.h {
                assert!((h - 1.0).abs() < 1e-4, "h drifted to {h}");
            }
        }
        assert!(max_abs(&(model.generators(Measure::Historical)[0].entries() - &g1)) < 1e-4);
        assert!(max_abs(&(model.generators(Measure::Historical)[1].entries() - &g2)) < 1e-4);
    }

    #[test]
    fn jlt_self_consistent_target_gives_unit_scales() {
        let g = Generator::try_new(dmatrix![
            -0.5, 0.4, 0.1;
            0.2, -0.5, 0.3;
            0.0, 0.0, 0.0
        ])
        .unwrap();
        let pd = expm(g.entries()).unwrap().column(2).into_owned();
        let outcome = calibrate_jlt(&g, &pd, 1.0, &CalibrationOptions::default()).unwrap();
        assert!(outcome.residual < 1e-10);
        for &s in &outcome.params.row_scales {
            assert!((s - 1.0).abs() < 1e-5, "scale drifted to {s}");
        }
    }

    #[test]
    fn two_state_com_keeps_absorbing_default() {
        let g = Generator::try_new(dmatrix![-1.0, 1.0; 0.0, 0.0]).unwrap();
        let h = MeasureChangeParams::new(dvector![0.5, 1.0]).unwrap();
        let q = apply_exponential_com(&g, &h);
        assert_eq!(q.entries()[(1, 0)], 0.0);
        assert_eq!(q.entries()[(1, 1)], 0.0);
        let _ = two_state_scale();
    }
}
