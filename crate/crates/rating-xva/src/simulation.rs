//! Exact Monte Carlo simulation of the calibrated rating model:
//! per-interval stochastic simulation (waiting time + jump target),
//! empirical occupancy estimators and the change-of-measure density
//! accumulated along each path.
//!
//! Reproducibility: every path draws from its own counter-derived RNG
//! stream, so results are bit-identical for a given seed regardless of
//! how the work is spread over threads.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Measure, PhctmcModel};
use crate::error::{Error, Result};
use crate::matfun::SquareMatrix;
use crate::rating::TENOR_TOL;

/// One simulated rating trajectory: right-continuous step function with
/// the post-jump state recorded at each jump time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPath {
    pub initial: usize,
    pub horizon: f64,
    /// (jump time, state entered), strictly increasing in time.
    pub jumps: Vec<(f64, usize)>,
}

impl RatingPath {
    /// State occupied at time t (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jumps.partition_point(|&(jt, _)| jt <= t);
        if idx == 0 {
            self.initial
        } else {
            self.jumps[idx - 1].1
        }
    }

    /// First time the path enters `state`, if ever.
    pub fn first_hit(&self, state: usize) -> Option<f64> {
        if self.initial == state {
            return Some(0.0);
        }
        self.jumps.iter().find(|&&(_, s)| s == state).map(|&(t, _)| t)
    }

    /// State occupied immediately before the jump into `state`.
    pub fn state_before(&self, state: usize) -> Option<usize> {
        if self.initial == state {
            return None;
        }
        let mut previous = self.initial;
        for &(_, s) in &self.jumps {
            if s == state {
                return Some(previous);
            }
            previous = s;
        }
        None
    }
}

/// Measure-change density along one path: terminal value, jump counts
/// per transition and the compensator integral.
#[derive(Debug, Clone)]
pub struct LikelihoodRatioPath {
    pub terminal: f64,
    pub jump_counts: DMatrix<u32>,
    pub compensator: f64,
}

fn split_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 step keeps derived component seeds decorrelated.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one path: a fixed keyed stream per (seed, path index).
pub(crate) fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Derive an independent seed for a named simulation component.
pub(crate) fn component_seed(seed: u64, component: u64) -> u64 {
    split_seed(seed, component.wrapping_add(1))
}

fn simulate_single(
    model: &PhctmcModel,
    measure: Measure,
    initial: usize,
    rng: &mut ChaCha8Rng,
) -> RatingPath {
    let generators = model.generators(measure);
    let breakpoints = model.schedule.breakpoints();
    let dim = model.scale.len();
    let mut state = initial;
    let mut t = 0.0f64;
    let mut jumps = Vec::new();

    for (k, generator) in generators.iter().enumerate() {
        let t_end = breakpoints[k + 1];
        let g = generator.entries();
        loop {
            let exit_rate = -g[(state, state)];
            if exit_rate == 0.0 {
                // Absorbing in this interval; roll to the next breakpoint.
                t = t_end;
                break;
            }
            let mut r1: f64 = rng.random();
            if r1 <= 0.0 {
                r1 = f64::MIN_POSITIVE;
            }
            let tau = -r1.ln() / exit_rate;
            if t + tau >= t_end {
                t = t_end;
                break;
            }
            t += tau;

            let r2: f64 = rng.random();
            let threshold = exit_rate * r2;
            let mut cumulative = 0.0;
            let mut next = usize::MAX;
            for j in 0..dim {
                if j == state {
                    continue;
                }
                cumulative += g[(state, j)];
                if cumulative >= threshold {
                    next = j;
                    break;
                }
            }
            if next == usize::MAX {
                // Rounding left the threshold above the final cumulative
                // sum; land on the last reachable state.
                next = (0..dim)
                    .rev()
                    .find(|&j| j != state && g[(state, j)] > 0.0)
                    .expect("positive exit rate implies a reachable state");
            }
            state = next;
            jumps.push((t, state));
        }
    }

    RatingPath {
        initial,
        horizon: *breakpoints.last().unwrap(),
        jumps,
    }
}

/// Simulate independent trajectories over the whole schedule under the
/// chosen measure. Deterministic in (seed, path index).
pub fn simulate_paths(
    model: &PhctmcModel,
    measure: Measure,
    initial: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<RatingPath>> {
    if initial >= model.scale.len() {
        return Err(Error::Invariant(format!(
            "initial rating index {initial} outside scale of {}",
            model.scale.len()
        )));
    }
    if n_paths == 0 {
        return Err(Error::Invariant("n_paths must be at least 1".into()));
    }
    Ok((0..n_paths)
        .into_par_iter()
        .map(|idx| {
            let mut rng = path_rng(seed, idx as u64);
            simulate_single(model, measure, initial, &mut rng)
        })
        .collect())
}

/// One block of paths per initial rating, each block with its own
/// derived seed.
pub fn simulate_rating_blocks(
    model: &PhctmcModel,
    measure: Measure,
    n_paths_per_rating: usize,
    seed: u64,
) -> Result<Vec<Vec<RatingPath>>> {
    (0..model.scale.len())
        .map(|rating| {
            simulate_paths(
                model,
                measure,
                rating,
                n_paths_per_rating,
                component_seed(seed, rating as u64),
            )
        })
        .collect()
}

/// Occupancy distribution at time t, one row per initial-rating block.
pub fn empirical_transition_matrix(blocks: &[Vec<RatingPath>], t: f64) -> Result<SquareMatrix> {
    let dim = blocks.len();
    let mut matrix = SquareMatrix::zeros(dim, dim);
    for (i, block) in blocks.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::Invariant(format!("empty path block for rating {i}")));
        }
        for path in block {
            if path.initial != i {
                return Err(Error::Invariant(format!(
                    "path with initial {} in block {i}",
                    path.initial
                )));
            }
            matrix[(i, path.state_at(t))] += 1.0;
        }
        let total = block.len() as f64;
        for j in 0..dim {
            matrix[(i, j)] /= total;
        }
    }
    Ok(matrix)
}

/// Measure-change density of a historical-measure path.
///
/// The terminal value multiplies the factor ratio of every jump and
/// discounts by the exponential of the compensator integral, both taken
/// piecewise over the schedule intervals.
pub fn likelihood_ratio(path: &RatingPath, model: &PhctmcModel) -> Result<LikelihoodRatioPath> {
    let breakpoints = model.schedule.breakpoints();
    if (path.horizon - model.schedule.horizon()).abs() > TENOR_TOL {
        return Err(Error::Invariant(format!(
            "path horizon {} does not match schedule horizon {}",
            path.horizon,
            model.schedule.horizon()
        )));
    }
    let dim = model.scale.len();
    if path.initial >= dim || path.jumps.iter().any(|&(_, s)| s >= dim) {
        return Err(Error::Invariant("path state outside model scale".into()));
    }

    let mut compensator = 0.0f64;
    let mut jump_product = 1.0f64;
    let mut jump_counts = DMatrix::<u32>::zeros(dim, dim);

    let mut state = path.initial;
    let mut jump_iter = path.jumps.iter().peekable();
    for k in 0..model.n_intervals() {
        let t_end = breakpoints[k + 1];
        let factors = model.measure_change()[k].factors();
        let gp = model.generators(Measure::Historical)[k].entries();
        let mut cursor = breakpoints[k];

        let occupancy_rate = |i: usize| -> f64 {
            (0..dim)
                .filter(|&j| j != i)
                .map(|j| (factors[j] / factors[i] - 1.0) * gp[(i, j)])
                .sum()
        };

        while let Some(&&(jump_time, jump_state)) = jump_iter.peek() {
            if jump_time >= t_end {
                break;
            }
            compensator += occupancy_rate(state) * (jump_time - cursor);
            jump_product *= factors[jump_state] / factors[state];
            jump_counts[(state, jump_state)] += 1;
            state = jump_state;
            cursor = jump_time;
            jump_iter.next();
        }
        compensator += occupancy_rate(state) * (t_end - cursor);
    }

    Ok(LikelihoodRatioPath {
        terminal: (-compensator).exp() * jump_product,
        jump_counts,
        compensator,
    })
}
