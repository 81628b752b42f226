//! Dense small-matrix functions: exponential, principal logarithm and
//! generator repair.
//!
//! Everything here is sized for rating-scale matrices (K up to a few tens),
//! so the implementations favour robustness over asymptotic speed:
//!
//! * [`expm`] — scaling and squaring with diagonal Padé approximants
//!   (degrees 3/5/7/9/13) following Higham's method,
//! * [`logm`] — inverse scaling and squaring: Denman–Beavers square roots
//!   until the iterate is close to the identity, then a diagonal Padé
//!   approximant of `log(I + X)` in Gauss–Legendre partial-fraction form,
//! * [`repair_generator`] — clips negative off-diagonal intensities to zero
//!   and rewrites the diagonal as the negated off-diagonal row sum.
//!
//! Both `expm` and `logm` reject non-finite input and report overflow or a
//! spectrum on the branch cut as errors instead of returning NaNs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense square matrix of f64 entries; the carrier for generators,
/// transition matrices and evolution systems.
pub type SquareMatrix = DMatrix<f64>;

/// Padé coefficients for the degree-13 approximant of `exp`.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm thresholds below which the degree-m Padé approximant of `exp`
/// is accurate to double precision (Higham 2005).
const EXP_THETA: [(usize, f64); 5] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
    (13, 5.371920351148152),
];

/// Gauss–Legendre nodes and weights on [0, 1] for the [8/8] Padé
/// approximant of `log(I + X)` in partial-fraction form.
const LOG_PADE8: [(f64, f64); 8] = [
    (0.019855071751231884, 0.050614268145188130),
    (0.101666761293186630, 0.111190517226687235),
    (0.237233795041835507, 0.156853322938943644),
    (0.408282678752175098, 0.181341891689180991),
    (0.591717321247824902, 0.181341891689180991),
    (0.762766204958164493, 0.156853322938943644),
    (0.898333238706813370, 0.111190517226687235),
    (0.980144928248768116, 0.050614268145188130),
];

/// Trim threshold for the inverse scaling phase: once `‖A - I‖₁` falls
/// below this, the degree-8 Padé approximant is at double precision.
const LOG_SERIES_RADIUS: f64 = 0.25;

fn one_norm(a: &SquareMatrix) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_finite(a: &SquareMatrix, op: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow(format!("{op}: input contains non-finite entries")))
    }
}

/// Matrix exponential by scaling and squaring with diagonal Padé
/// approximants.
///
/// Accurate to ~1e-12 relative for generator-scale inputs; extreme norms
/// fail with an overflow error rather than silently producing NaN.
pub fn expm(a: &SquareMatrix) -> Result<SquareMatrix> {
    check_finite(a, "expm")?;
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!("expm: {}x{} is not square", n, a.ncols())));
    }
    let norm = one_norm(a);
    if norm > 1.0e8 {
        return Err(Error::Overflow(format!("expm: 1-norm {norm:.3e} too large")));
    }

    let identity = SquareMatrix::identity(n, n);
    for &(m, theta) in &EXP_THETA[..4] {
        if norm <= theta {
            let (u, v) = pade_low_degree(a, m);
            return pade_solve(&u, &v, 0);
        }
    }

    // Degree 13 with scaling.
    let theta13 = EXP_THETA[4].1;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-s);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &PADE13;
    let u = &scaled
        * (&a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
            + b[7] * &a6
            + b[5] * &a4
            + b[3] * &a2
            + b[1] * &identity);
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &identity;
    pade_solve(&u, &v, s)
}

/// Odd/even Padé split for the low degrees (3, 5, 7, 9).
fn pade_low_degree(a: &SquareMatrix, m: usize) -> (SquareMatrix, SquareMatrix) {
    let coeffs: &[f64] = match m {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
        9 => &[
            17643225600.0,
            8821612800.0,
            2075673600.0,
            302702400.0,
            30270240.0,
            2162160.0,
            110880.0,
            3960.0,
            90.0,
            1.0,
        ],
        _ => unreachable!("unsupported Padé degree"),
    };
    let n = a.nrows();
    let identity = SquareMatrix::identity(n, n);
    let mut even = SquareMatrix::zeros(n, n);
    let mut odd = SquareMatrix::zeros(n, n);
    let mut power = identity.clone();
    for (k, &c) in coeffs.iter().enumerate() {
        if k % 2 == 0 {
            even += c * &power;
        } else {
            odd += c * &power;
        }
        if k + 1 < coeffs.len() {
            power = &power * a;
        }
    }
    // U carries the odd part (one factor of A pulled out keeps symmetry).
    (odd, even)
}

fn pade_solve(u: &SquareMatrix, v: &SquareMatrix, squarings: i32) -> Result<SquareMatrix> {
    let lhs = v - u;
    let rhs = v + u;
    let lu = lhs.lu();
    let mut r = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("expm: Padé denominator is singular".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().all(|x| x.is_finite()) {
        Ok(r)
    } else {
        Err(Error::Overflow("expm: result overflowed during squaring".into()))
    }
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Fails if any eigenvalue lies on the closed negative real axis
/// (including 0), where the principal branch is undefined.
pub fn logm(a: &SquareMatrix) -> Result<SquareMatrix> {
    check_finite(a, "logm")?;
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!("logm: {}x{} is not square", n, a.ncols())));
    }

    // Deterministic branch-cut detection: an eigenvalue with tiny imaginary
    // part and non-positive (or tiny) real part sits on the cut.
    let eigs = a.clone().complex_eigenvalues();
    for lambda in eigs.iter() {
        if lambda.re < 1.0e-12 && lambda.im.abs() < 1.0e-12 {
            return Err(Error::LogBranchCut {
                re: lambda.re,
                im: lambda.im,
            });
        }
    }

    let identity = SquareMatrix::identity(n, n);
    let mut iterate = a.clone();
    let mut sqrt_steps = 0u32;
    while one_norm(&(&iterate - &identity)) > LOG_SERIES_RADIUS {
        iterate = sqrtm_denman_beavers(&iterate)?;
        sqrt_steps += 1;
        if sqrt_steps > 60 {
            return Err(Error::NonConvergence {
                iterations: 60,
                objective: one_norm(&(&iterate - &identity)),
            });
        }
    }

    // Padé approximant of log(I + X) in partial-fraction form.
    let x = &iterate - &identity;
    let mut log_scaled = SquareMatrix::zeros(n, n);
    for &(node, weight) in &LOG_PADE8 {
        let denom = &identity + node * &x;
        let solved = denom
            .lu()
            .solve(&x)
            .ok_or_else(|| Error::Singular("logm: Padé denominator is singular".into()))?;
        log_scaled += weight * solved;
    }
    Ok(log_scaled * 2f64.powi(sqrt_steps as i32))
}

/// Principal square root via the Denman–Beavers iteration with
/// determinant scaling.
fn sqrtm_denman_beavers(a: &SquareMatrix) -> Result<SquareMatrix> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = SquareMatrix::identity(n, n);
    let mut prev_diff = f64::INFINITY;
    for _ in 0..60 {
        let det_y = y.clone().lu().determinant().abs();
        let det_z = z.clone().lu().determinant().abs();
        // Scaling accelerates the early iterations; switch it off close to
        // convergence where it would otherwise stall the quadratic phase.
        let mu = if prev_diff > 1.0e-2 && det_y > 0.0 && det_z > 0.0 {
            (det_y * det_z).powf(-1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let y_scaled = mu * &y;
        let z_scaled = mu * &z;
        let y_inv = y_scaled
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("sqrtm: iterate became singular".into()))?;
        let z_inv = z_scaled
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("sqrtm: iterate became singular".into()))?;
        let y_next = 0.5 * (&y_scaled + z_inv);
        let z_next = 0.5 * (&z_scaled + y_inv);
        let diff = one_norm(&(&y_next - &y)) / one_norm(&y_next).max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if diff < 1.0e-15 {
            return Ok(y);
        }
        prev_diff = diff;
    }
    Err(Error::NonConvergence {
        iterations: 60,
        objective: prev_diff,
    })
}

/// Generator repair: negative off-diagonal entries are clipped to zero and
/// each diagonal entry is overwritten with the negated off-diagonal row
/// sum, so every row sums to zero exactly.
pub fn repair_generator(a: &SquareMatrix) -> SquareMatrix {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        let mut off_diag_sum = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            if out[(i, j)] < 0.0 {
                out[(i, j)] = 0.0;
            }
            off_diag_sum += out[(i, j)];
        }
        out[(i, i)] = -off_diag_sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn max_abs_diff(a: &SquareMatrix, b: &SquareMatrix) -> f64 {
        (a - b).iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = SquareMatrix::zeros(4, 4);
        let e = expm(&z).unwrap();
        assert_eq!(max_abs_diff(&e, &SquareMatrix::identity(4, 4)), 0.0);
    }

    #[test]
    fn expm_two_state_closed_form() {
        // exp of [[-a, a], [b, -b]] has the classical closed form in a+b.
        let (a, b) = (1.0, 2.0);
        let g = dmatrix![-a, a; b, -b];
        let e = expm(&g).unwrap();
        let s = a + b;
        let decay = (-s).exp();
        let expected = dmatrix![
            (b + a * decay) / s, a * (1.0 - decay) / s;
            b * (1.0 - decay) / s, (a + b * decay) / s
        ];
        assert!(max_abs_diff(&e, &expected) < 1e-14);
    }

    #[test]
    fn expm_of_generator_is_row_stochastic() {
        let g = dmatrix![
            -0.30, 0.20, 0.10;
            0.05, -0.15, 0.10;
            0.00, 0.00, 0.00
        ];
        let e = expm(&g).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(e.row(i).sum(), 1.0, epsilon = 1e-13);
            assert!(e.row(i).iter().all(|&p| p >= -1e-14));
        }
    }

    #[test]
    fn expm_large_norm_uses_scaling() {
        let g = dmatrix![-40.0, 40.0; 10.0, -10.0];
        let e = expm(&g).unwrap();
        // Stationary distribution of this chain is (1/5, 4/5).
        assert_abs_diff_eq!(e[(0, 0)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(e[(1, 1)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn expm_rejects_non_finite() {
        let g = dmatrix![f64::NAN, 0.0; 0.0, 0.0];
        assert!(expm(&g).is_err());
    }

    #[test]
    fn logm_of_identity_is_zero() {
        let id = SquareMatrix::identity(5, 5);
        let l = logm(&id).unwrap();
        assert!(one_norm(&l) < 1e-15);
    }

    #[test]
    fn logm_rejects_spectrum_on_cut() {
        // Permutation matrix has eigenvalue -1.
        let p = dmatrix![0.0, 1.0; 1.0, 0.0];
        match logm(&p) {
            Err(Error::LogBranchCut { re, .. }) => assert!((re + 1.0).abs() < 1e-10),
            other => panic!("expected branch-cut error, got {other:?}"),
        }
    }

    #[test]
    fn logm_rejects_singular() {
        let s = dmatrix![1.0, 0.0; 0.0, 0.0];
        assert!(matches!(logm(&s), Err(Error::LogBranchCut { .. })));
    }

    #[test]
    fn log_exp_round_trip_on_generator() {
        let g = dmatrix![
            -0.11, 0.06, 0.03, 0.02;
            0.01, -0.22, 0.16, 0.05;
            0.00, 0.04, -0.10, 0.06;
            0.00, 0.00, 0.00, 0.00
        ];
        let round = logm(&expm(&g).unwrap()).unwrap();
        assert!(max_abs_diff(&round, &g) < 1e-11);
    }

    #[test]
    fn exp_log_round_trip_far_from_identity() {
        // Strong mixing so that several square roots are needed.
        let g = dmatrix![-3.0, 3.0; 4.5, -4.5];
        let m = expm(&g).unwrap();
        let l = logm(&m).unwrap();
        let back = expm(&l).unwrap();
        assert!(max_abs_diff(&back, &m) / one_norm(&m) < 1e-12);
    }

    #[test]
    fn repair_is_fixed_point_on_valid_generator() {
        let g = dmatrix![
            -0.5, 0.3, 0.2;
            0.1, -0.4, 0.3;
            0.0, 0.0, 0.0
        ];
        assert_eq!(max_abs_diff(&repair_generator(&g), &g), 0.0);
    }

    #[test]
    fn repair_clips_and_resums() {
        let m = dmatrix![
            -1.0, 1.1, -0.1;
            0.0, 0.0, 0.0;
            0.0, 0.0, 0.0
        ];
        let r = repair_generator(&m);
        let expected = dmatrix![
            -1.1, 1.1, 0.0;
            0.0, 0.0, 0.0;
            0.0, 0.0, 0.0
        ];
        assert_eq!(max_abs_diff(&r, &expected), 0.0);
    }

    #[test]
    fn repair_is_idempotent() {
        let m = dmatrix![
            0.3, -0.4, 0.8;
            -0.2, 0.9, -0.1;
            0.05, 0.0, -2.0
        ];
        let once = repair_generator(&m);
        let twice = repair_generator(&once);
        assert_eq!(max_abs_diff(&once, &twice), 0.0);
        for i in 0..3 {
            assert_abs_diff_eq!(once.row(i).sum(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn semigroup_property() {
        let g = dmatrix![
            -0.8, 0.5, 0.3;
            0.2, -0.6, 0.4;
            0.0, 0.0, 0.0
        ];
        for s in [0.5, 1.0, 2.0] {
            let lhs = expm(&g).unwrap() * expm(&(&g * s)).unwrap();
            let rhs = expm(&(&g * (1.0 + s))).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-10, "semigroup violated at s={s}");
        }
    }
}
