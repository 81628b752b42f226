//! Bound-constrained Levenberg–Marquardt for small dense least-squares
//! problems.
//!
//! Minimizes `‖r(x)‖²` over a box `[lower, upper]` with a damped
//! Gauss–Newton step and projection of each candidate back onto the box.
//! The Jacobian comes from forward differences, so callers only supply
//! the residual map. Accepted steps never increase the objective, which
//! downstream reports rely on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative objective decrease below which the fit is converged.
    pub ftol: f64,
    /// Step norm (relative to the iterate) below which the fit is converged.
    pub xtol: f64,
    /// Absolute objective value at which the fit stops early. Callers set
    /// this from the natural scale of their residuals; 0 disables it.
    pub objective_floor: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            ftol: 1e-12,
            xtol: 1e-12,
            objective_floor: 0.0,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    /// Sum of squared residuals at the solution.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_history: Vec<f64>,
}

fn clamp_to_box(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for j in 0..x.len() {
        x[j] = x[j].clamp(lower[j], upper[j]);
    }
}

fn forward_jacobian<F>(
    residuals: &F,
    x: &DVector<f64>,
    r0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let m = r0.len();
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut jac = DMatrix::zeros(m, n);
    let mut x_step = x.clone();
    for j in 0..n {
        let h = sqrt_eps * x[j].abs().max(1.0);
        // Step backwards when a forward step would leave the box; for
        // degenerate boxes pick whichever side has more room.
        let forward_ok = x[j] + h <= upper[j];
        let room_back = x[j] - lower[j];
        let (step, sign) = if forward_ok || room_back < h { (h, 1.0) } else { (-h, -1.0) };
        x_step[j] = x[j] + step;
        let r_step = residuals(&x_step);
        for i in 0..m {
            jac[(i, j)] = sign * (r_step[i] - r0[i]) / h;
        }
        x_step[j] = x[j];
    }
    jac
}

/// Minimize `‖residuals(x)‖²` over the box `[lower, upper]` starting
/// from `x0` (projected into the box first).
pub fn minimize_bounded<F>(
    residuals: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    options: &LmOptions,
) -> Result<LmOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    for j in 0..n {
        assert!(
            lower[j] <= upper[j],
            "infeasible bounds at parameter {j}: [{}, {}]",
            lower[j],
            upper[j]
        );
    }

    let mut x = x0.clone();
    clamp_to_box(&mut x, lower, upper);
    let mut r = residuals(&x);
    let mut cost = r.norm_squared();
    let mut damping = options.initial_damping;
    let mut nu = 2.0f64;
    let mut history = vec![cost];
    // Accepted steps whose relative progress has fallen below resolution;
    // a run of them means the fit is rattling around the noise floor of
    // the finite-difference Jacobian.
    let mut stalled_steps = 0usize;

    if !cost.is_finite() {
        return Err(Error::NonConvergence {
            iterations: 0,
            objective: cost,
        });
    }
    if cost <= options.objective_floor {
        return Ok(LmOutcome {
            x,
            objective: cost,
            iterations: 0,
            objective_history: history,
        });
    }

    for iteration in 1..=options.max_iterations {
        let jac = forward_jacobian(&residuals, &x, &r, lower, upper);
        let gradient = jac.transpose() * &r;
        let jtj = jac.transpose() * &jac;

        if std::env::var_os("LM_TRACE").is_some() {
            let scaled_g = (0..n)
                .map(|j| (gradient[j] * x[j].abs().max(1.0)).abs())
                .fold(0.0f64, f64::max);
            eprintln!("lm-trace iter={iteration} cost={cost:.6e} scaled_g={scaled_g:.6e}");
        }

        let max_diag = (0..n).map(|j| jtj[(j, j)]).fold(0.0f64, f64::max);
        if max_diag <= 0.0 {
            // Flat residual surface: nothing left to do.
            return Ok(LmOutcome {
                x,
                objective: cost,
                iterations: iteration,
                objective_history: history,
            });
        }
        let diag_floor = 1e-10 * max_diag;

        let mut accepted = false;
        for _ in 0..60 {
            let mut system = jtj.clone();
            let mut damp_diag = DVector::zeros(n);
            for j in 0..n {
                damp_diag[j] = damping * jtj[(j, j)].max(diag_floor);
                system[(j, j)] += damp_diag[j];
            }
            let step = match system.cholesky() {
                Some(chol) => chol.solve(&(-&gradient)),
                None => {
                    damping *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let mut candidate = &x + &step;
            clamp_to_box(&mut candidate, lower, upper);
            let r_new = residuals(&candidate);
            let cost_new = r_new.norm_squared();

            if cost_new.is_finite() && cost_new < cost {
                let projected_step = (&candidate - &x).norm();
                let decrease = cost - cost_new;
                // Gain ratio of actual vs model decrease steers the damping
                // (Nielsen's update); poor models keep the damping high.
                let predicted = step
                    .iter()
                    .enumerate()
                    .map(|(j, &s)| s * (damp_diag[j] * s - gradient[j]))
                    .sum::<f64>()
                    .max(f64::MIN_POSITIVE);
                let gain = decrease / predicted;
                damping *= (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0);
                damping = damping.max(1e-14);
                nu = 2.0;
                x = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                accepted = true;

                let rel_decrease = decrease / cost.max(f64::MIN_POSITIVE);
                if rel_decrease <= 1e-9 {
                    stalled_steps += 1;
                } else {
                    stalled_steps = 0;
                }
                let f_done = decrease <= options.ftol * cost.max(f64::MIN_POSITIVE);
                let x_done = projected_step <= options.xtol * (x.norm() + options.xtol);
                let floor_hit = cost <= options.objective_floor;
                if f_done || x_done || floor_hit || stalled_steps >= 20 {
                    return Ok(LmOutcome {
                        x,
                        objective: cost,
                        iterations: iteration,
                        objective_history: history,
                    });
                }
                break;
            }
            damping *= nu;
            nu *= 2.0;
            if damping > 1e15 {
                // No direction improves the objective: local minimum at
                // the resolution of the damping ladder.
                return Ok(LmOutcome {
                    x,
                    objective: cost,
                    iterations: iteration,
                    objective_history: history,
                });
            }
        }
        if !accepted {
            return Ok(LmOutcome {
                x,
                objective: cost,
                iterations: iteration,
                objective_history: history,
            });
        }
    }

    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        objective: cost,
    })
}
