//! Domain types and file ingestion for rating scales, transition matrices,
//! default curves and piecewise schedules.
//!
//! Probabilities are stored as fractions internally; percent appears only
//! at the CSV boundary. The default state is always the last index of the
//! scale and is absorbing everywhere.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::SquareMatrix;

/// Tolerance for matching tenors and breakpoints expressed in years.
/// Tolerates decimal representations of 1/12, 3/12 and the like.
pub const TENOR_TOL: f64 = 1e-9;

/// Row-sum tolerance for adjusted matrices and generator rows.
pub const ROW_TOL: f64 = 1e-10;

/// Ordered rating labels, best first, with the absorbing default state
/// fixed as the last entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    labels: Vec<String>,
}

impl RatingScale {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Invariant(format!(
                "rating scale needs at least 2 states, got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[i + 1..].contains(a) {
                return Err(Error::Invariant(format!("duplicate rating label '{a}'")));
            }
        }
        Ok(Self { labels })
    }

    /// The seven-state scale used by the bundled data set.
    pub fn fitch() -> Self {
        Self::new(
            ["F1+", "F1", "F2", "F3", "B", "C", "D"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("static labels are valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Index of the absorbing default state (always the last).
    pub fn default_index(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl fmt::Display for RatingScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.labels.join(","))
    }
}

/// Whether a matrix still carries withdrawal deficiency (market) or has
/// been redistributed to full row sums (adjusted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    /// Published data: row sums may fall short of one.
    Market,
    /// Withdrawal-adjusted: every row sums to one.
    Adjusted,
}

/// Row-stochastic (or withdrawal-deficient) transition matrix over a
/// fixed horizon in year fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub horizon: f64,
    pub kind: MatrixKind,
    entries: SquareMatrix,
}

impl TransitionMatrix {
    pub fn new(horizon: f64, kind: MatrixKind, mut entries: SquareMatrix) -> Result<Self> {
        let n = entries.nrows();
        if n != entries.ncols() {
            return Err(Error::Dimension(format!(
                "transition matrix must be square, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Invariant(format!("horizon must be positive, got {horizon}")));
        }
        for i in 0..n {
            for j in 0..n {
                let p = entries[(i, j)];
                if !(-1.0e-12..=1.0 + 1.0e-12).contains(&p) {
                    return Err(Error::Invariant(format!(
                        "entry ({i},{j}) = {p} outside [0, 1]"
                    )));
                }
                entries[(i, j)] = p.clamp(0.0, 1.0);
            }
        }
        for i in 0..n {
            let sum: f64 = entries.row(i).sum();
            match kind {
                MatrixKind::Market => {
                    if sum > 1.0 + 1.0e-12 {
                        return Err(Error::Invariant(format!(
                            "row {i} sum exceeds 1: {sum:.12}"
                        )));
                    }
                }
                MatrixKind::Adjusted => {
                    if (sum - 1.0).abs() > ROW_TOL {
                        return Err(Error::Invariant(format!(
                            "adjusted row {i} sums to {sum:.12}, expected 1"
                        )));
                    }
                }
            }
        }
        // Absorbing default: last row must be the unit vector e_K.
        let last = n - 1;
        for j in 0..n {
            let expected = if j == last { 1.0 } else { 0.0 };
            if (entries[(last, j)] - expected).abs() > ROW_TOL {
                return Err(Error::Invariant(format!(
                    "default row is not absorbing: entry ({last},{j}) = {}",
                    entries[(last, j)]
                )));
            }
        }
        Ok(Self { horizon, kind, entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &SquareMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> SquareMatrix {
        self.entries
    }
}

/// Infinitesimal generator: non-negative off-diagonal intensities
/// (1/year), zero row sums, identically zero default row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    entries: SquareMatrix,
}

impl Generator {
    pub fn try_new(mut entries: SquareMatrix) -> Result<Self> {
        let n = entries.nrows();
        if n != entries.ncols() {
            return Err(Error::Dimension(format!(
                "generator must be square, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let x = entries[(i, j)];
                if !x.is_finite() {
                    return Err(Error::Invariant(format!("generator entry ({i},{j}) not finite")));
                }
                if i != j && x < 0.0 {
                    if x < -1.0e-12 {
                        return Err(Error::Invariant(format!(
                            "negative off-diagonal intensity ({i},{j}) = {x:.3e}"
                        )));
                    }
                    entries[(i, j)] = 0.0;
                }
            }
            let sum: f64 = entries.row(i).sum();
            if sum.abs() > ROW_TOL {
                return Err(Error::Invariant(format!(
                    "generator row {i} sums to {sum:.3e}, expected 0"
                )));
            }
        }
        // Default row must vanish; snap numerical dust to exact zero so the
        // absorbing branch of the simulator can compare against 0.
        let last = n - 1;
        for j in 0..n {
            if entries[(last, j)].abs() > ROW_TOL {
                return Err(Error::Invariant(format!(
                    "default row entry ({last},{j}) = {:.3e}, expected 0",
                    entries[(last, j)]
                )));
            }
            entries[(last, j)] = 0.0;
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &SquareMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> SquareMatrix {
        self.entries
    }
}

/// Validity report for a candidate generator matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorReport {
    /// Per-row sum residual (should be 0).
    pub row_sum_residuals: Vec<f64>,
    /// Most negative off-diagonal entry (0 if none are negative).
    pub min_off_diagonal: f64,
    /// Tolerance the verdict was taken under.
    pub tol: f64,
    pub is_valid: bool,
}

/// Pure validity check: off-diagonals non-negative and row sums zero,
/// both within `tol`.
pub fn validate_generator(candidate: &SquareMatrix, tol: f64) -> GeneratorReport {
    let n = candidate.nrows();
    let mut row_sum_residuals = Vec::with_capacity(n);
    let mut min_off_diagonal = 0.0f64;
    for i in 0..n {
        row_sum_residuals.push(candidate.row(i).sum());
        for j in 0..n {
            if i != j {
                min_off_diagonal = min_off_diagonal.min(candidate[(i, j)]);
            }
        }
    }
    let is_valid = min_off_diagonal >= -tol
        && row_sum_residuals.iter().all(|r| r.abs() <= tol);
    GeneratorReport {
        row_sum_residuals,
        min_off_diagonal,
        tol,
        is_valid,
    }
}

/// Risk-neutral cumulative default probabilities per tenor and initial
/// rating. The default-state entry is 1 at every tenor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefaultCurve {
    tenors: Vec<f64>,
    /// One vector of length K per tenor.
    pd: Vec<DVector<f64>>,
}

impl DefaultCurve {
    pub fn new(tenors: Vec<f64>, pd: Vec<DVector<f64>>) -> Result<Self> {
        if tenors.is_empty() || tenors.len() != pd.len() {
            return Err(Error::Dimension(format!(
                "{} tenors vs {} pd vectors",
                tenors.len(),
                pd.len()
            )));
        }
        for w in tenors.windows(2) {
            if w[1] <= w[0] + TENOR_TOL {
                return Err(Error::Invariant(format!(
                    "tenors not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if tenors[0] <= 0.0 {
            return Err(Error::Invariant("first tenor must be positive".into()));
        }
        let k = pd[0].len();
        for (t_idx, v) in pd.iter().enumerate() {
            if v.len() != k {
                return Err(Error::Dimension("pd vectors differ in length".into()));
            }
            for (i, &p) in v.iter().enumerate() {
                if !(-1.0e-12..=1.0 + 1.0e-12).contains(&p) {
                    return Err(Error::Invariant(format!(
                        "pd for rating {i} at tenor index {t_idx} = {p} outside [0, 1]"
                    )));
                }
            }
            if (v[k - 1] - 1.0).abs() > 1.0e-12 {
                return Err(Error::Invariant(format!(
                    "default-state pd must be 1, got {} at tenor index {t_idx}",
                    v[k - 1]
                )));
            }
        }
        for i in 0..k {
            for t_idx in 1..tenors.len() {
                if pd[t_idx][i] < pd[t_idx - 1][i] - 1.0e-12 {
                    return Err(Error::Invariant(format!(
                        "pd for rating {i} decreases between tenors {} and {}",
                        tenors[t_idx - 1],
                        tenors[t_idx]
                    )));
                }
            }
        }
        Ok(Self { tenors, pd })
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn dim(&self) -> usize {
        self.pd[0].len()
    }

    /// PD vector at the tenor with the given index.
    pub fn pd_at(&self, tenor_index: usize) -> &DVector<f64> {
        &self.pd[tenor_index]
    }

    /// PD for a single rating at the tenor closest to `t` (within tolerance).
    pub fn pd_at_time(&self, t: f64) -> Option<&DVector<f64>> {
        self.tenors
            .iter()
            .position(|&tenor| (tenor - t).abs() <= TENOR_TOL)
            .map(|idx| &self.pd[idx])
    }
}

/// Breakpoints T_0 < T_1 < ... < T_n with T_0 = 0; the process is
/// homogeneous on each interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSchedule {
    breakpoints: Vec<f64>,
}

impl PiecewiseSchedule {
    pub fn new(breakpoints: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::Invariant(
                "schedule needs at least one interval".into(),
            ));
        }
        if breakpoints[0].abs() > TENOR_TOL {
            return Err(Error::Invariant(format!(
                "schedule must start at 0, got {}",
                breakpoints[0]
            )));
        }
        for w in breakpoints.windows(2) {
            if w[1] <= w[0] + TENOR_TOL {
                return Err(Error::Invariant(format!(
                    "breakpoints not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let mut breakpoints = breakpoints;
        breakpoints[0] = 0.0;
        Ok(Self { breakpoints })
    }

    /// Schedule [0, t_1, ..., t_n] built from matrix/PD tenors.
    pub fn from_tenors(tenors: &[f64]) -> Result<Self> {
        let mut b = Vec::with_capacity(tenors.len() + 1);
        b.push(0.0);
        b.extend_from_slice(tenors);
        Self::new(b)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn n_intervals(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// Length of interval k (0-based).
    pub fn interval_length(&self, k: usize) -> f64 {
        self.breakpoints[k + 1] - self.breakpoints[k]
    }

    /// Index of the interval containing t, with t = T_n mapping to the
    /// last interval.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if t < 0.0 || t > self.horizon() + TENOR_TOL {
            return None;
        }
        for k in 0..self.n_intervals() {
            if t < self.breakpoints[k + 1] {
                return Some(k);
            }
        }
        Some(self.n_intervals() - 1)
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion and serialization
// ---------------------------------------------------------------------------

/// Read a rating-matrix CSV (header row = labels, header column =
/// from-rating, entries in percent) into a fraction-valued matrix.
pub fn read_matrix_csv(path: &Path, scale: &RatingScale) -> Result<SquareMatrix> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;

    let k = scale.len();
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?
        .clone();
    if headers.len() != k + 1 {
        return Err(Error::Dimension(format!(
            "{display}: expected {} header columns, got {}",
            k + 1,
            headers.len()
        )));
    }
    for (j, label) in scale.labels().iter().enumerate() {
        if &headers[j + 1] != label {
            return Err(Error::parse(
                &display,
                format!("header column {} is '{}', expected '{label}'", j + 1, &headers[j + 1]),
            ));
        }
    }

    let mut entries = SquareMatrix::zeros(k, k);
    let mut row_count = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
        if i >= k {
            return Err(Error::Dimension(format!("{display}: more than {k} rows")));
        }
        if record.len() != k + 1 {
            return Err(Error::Dimension(format!(
                "{display}: row {i} has {} fields, expected {}",
                record.len(),
                k + 1
            )));
        }
        if record[0] != *scale.label(i) {
            return Err(Error::parse(
                &display,
                format!("row {i} labelled '{}', expected '{}'", &record[0], scale.label(i)),
            ));
        }
        for j in 0..k {
            let pct: f64 = record[j + 1].parse().map_err(|_| {
                Error::parse(&display, format!("cannot parse '{}' at ({i},{j})", &record[j + 1]))
            })?;
            entries[(i, j)] = pct / 100.0;
        }
        row_count += 1;
    }
    if row_count != k {
        return Err(Error::Dimension(format!(
            "{display}: {row_count} rows, expected {k}"
        )));
    }
    Ok(entries)
}

/// Write a fraction-valued matrix as percent CSV in the exchange layout.
pub fn write_matrix_csv(path: &Path, scale: &RatingScale, entries: &SquareMatrix) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    out.push_str("from/to");
    for label in scale.labels() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for i in 0..scale.len() {
        out.push_str(scale.label(i));
        for j in 0..scale.len() {
            out.push_str(&format!(",{:.10}", entries[(i, j)] * 100.0));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

/// Write a raw-valued matrix (e.g. a generator in 1/year) as CSV with
/// full precision.
pub fn write_raw_matrix_csv(path: &Path, scale: &RatingScale, entries: &SquareMatrix) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    out.push_str("from/to");
    for label in scale.labels() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for i in 0..scale.len() {
        out.push_str(scale.label(i));
        for j in 0..scale.len() {
            out.push_str(&format!(",{:.16e}", entries[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

/// Read a PD CSV (header = tenors in year fractions, one row per rating,
/// entries in percent).
pub fn read_pd_csv(path: &Path, scale: &RatingScale) -> Result<DefaultCurve> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Dimension(format!("{display}: no tenor columns")));
    }
    let tenors: Vec<f64> = headers
        .iter()
        .skip(1)
        .map(|h| {
            h.parse::<f64>()
                .map_err(|_| Error::parse(&display, format!("cannot parse tenor '{h}'")))
        })
        .collect::<Result<_>>()?;

    let k = scale.len();
    let mut by_rating = vec![None::<Vec<f64>>; k];
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
        let label = &record[0];
        let Some(i) = scale.index_of(label) else {
            return Err(Error::parse(&display, format!("unknown rating '{label}'")));
        };
        if record.len() != tenors.len() + 1 {
            return Err(Error::Dimension(format!(
                "{display}: row '{label}' has {} fields, expected {}",
                record.len(),
                tenors.len() + 1
            )));
        }
        let values: Vec<f64> = (0..tenors.len())
            .map(|j| {
                record[j + 1].parse::<f64>().map(|p| p / 100.0).map_err(|_| {
                    Error::parse(&display, format!("cannot parse '{}' for '{label}'", &record[j + 1]))
                })
            })
            .collect::<Result<_>>()?;
        by_rating[i] = Some(values);
    }
    let mut pd = Vec::with_capacity(tenors.len());
    for t_idx in 0..tenors.len() {
        let mut v = DVector::zeros(k);
        for i in 0..k {
            let row = by_rating[i]
                .as_ref()
                .ok_or_else(|| Error::parse(&display, format!("missing row for '{}'", scale.label(i))))?;
            v[i] = row[t_idx];
        }
        pd.push(v);
    }
    DefaultCurve::new(tenors, pd)
}

/// Load the market matrices and the default curve, check consistency and
/// build the implied schedule.
///
/// Matrix files must be supplied in tenor order and match the PD curve
/// one-to-one; the returned matrices carry their tenor as horizon.
pub fn load_market_data(
    matrix_files: &[impl AsRef<Path>],
    pd_file: impl AsRef<Path>,
    scale: &RatingScale,
) -> Result<(Vec<TransitionMatrix>, DefaultCurve, PiecewiseSchedule)> {
    let curve = read_pd_csv(pd_file.as_ref(), scale)?;
    if matrix_files.len() != curve.tenors().len() {
        return Err(Error::Dimension(format!(
            "{} matrix files vs {} PD tenors",
            matrix_files.len(),
            curve.tenors().len()
        )));
    }
    let mut matrices = Vec::with_capacity(matrix_files.len());
    for (idx, file) in matrix_files.iter().enumerate() {
        let entries = read_matrix_csv(file.as_ref(), scale)?;
        let horizon = curve.tenors()[idx];
        matrices.push(TransitionMatrix::new(horizon, MatrixKind::Market, entries)?);
    }
    let schedule = PiecewiseSchedule::from_tenors(curve.tenors())?;
    Ok((matrices, curve, schedule))
}
