//! Energy landscape of the unified similarity and its fixed-point descent.
//!
//! Scores are `s_k = -‖x - ξ_k‖² + bᵀ(x - ξ_k)`, the energy is `E(x) = -lse(s)`,
//! and one descent step is `x' = Ξ softmax(s) + b/2`.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::models::{log_sum_exp, separate};
use crate::similarity::dot;
use crate::types::{MemoryMatrix, QueryVector, SeparationKind, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentConfig {
    pub max_iters: usize,
    /// Converged once `‖x^{t+1} - x^t‖₂ <= step_tol`.
    pub step_tol: f64,
    /// Per-step energy increase tolerated as rounding.
    pub energy_slack: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            step_tol: 1e-10,
            energy_slack: 1e-10,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.step_tol > 0.0) || !(self.energy_slack > 0.0) {
            return Err(Error::Config(
                "descent needs max_iters >= 1 and positive tolerances".into(),
            ));
        }
        Ok(())
    }
}

fn check_inputs(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Result<()> {
    memory.check_query("query", x)?;
    check_len("bias", memory.d(), b.len())?;
    check_finite("query", x)?;
    check_finite("bias", b)
}

fn scores_unchecked(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    memory
        .columns()
        .map(|xi| {
            xi.iter()
                .zip(x)
                .zip(b)
                .map(|((&p, &v), &bi)| {
                    let diff = v - p;
                    -diff * diff + bi * diff
                })
                .sum()
        })
        .collect()
}

pub fn unified_scores(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_inputs(memory, x, b)?;
    Ok(scores_unchecked(memory, x, b))
}

pub fn energy(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Result<f64> {
    check_inputs(memory, x, b)?;
    Ok(-log_sum_exp(&scores_unchecked(memory, x, b)))
}

/// `-ln N - ‖b‖²/4`, below which the energy never falls.
pub fn energy_lower_bound(n: usize, b: &[f64]) -> f64 {
    -(n as f64).ln() - dot(b, b) / 4.0
}

/// The energy written as `‖x‖² - lse(A x + c)` with `A_k = 2ξ_k + b` and `c_k = -ξ_kᵀb - ‖ξ_k‖²`.
pub fn energy_rewritten(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Result<f64> {
    check_inputs(memory, x, b)?;
    let linear: Vec<f64> = memory
        .columns()
        .map(|xi| {
            let a_x: f64 = xi.iter().zip(b).zip(x).map(|((&p, &bi), &v)| (2.0 * p + bi) * v).sum();
            a_x - dot(xi, b) - dot(xi, xi)
        })
        .collect();
    Ok(dot(x, x) - log_sum_exp(&linear))
}

fn iterate_unchecked(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let p = separate(&scores_unchecked(memory, x, b), SeparationKind::Softmax);
    let mut y = memory.combine(&p);
    for (v, bi) in y.iter_mut().zip(b) {
        *v += 0.5 * bi;
    }
    y
}

pub fn energy_iterate(memory: &MemoryMatrix, x: &[f64], b: &[f64]) -> Result<QueryVector> {
    check_inputs(memory, x, b)?;
    Ok(QueryVector::from_finite(iterate_unchecked(memory, x, b)))
}

/// Iterates from `x0`, failing if the energy rises beyond the slack or drops below the bound.
pub fn descend(memory: &MemoryMatrix, x0: &[f64], b: &[f64], cfg: &DescentConfig) -> Result<Trajectory> {
    check_inputs(memory, x0, b)?;
    cfg.validate()?;
    let bound = energy_lower_bound(memory.n(), b) - cfg.energy_slack;
    let energy_at = |x: &[f64]| -log_sum_exp(&scores_unchecked(memory, x, b));
    let mut x = x0.to_vec();
    let mut e = energy_at(&x);
    if e < bound {
        return Err(Error::BelowBound {
            step: 0,
            energy: e,
            bound,
        });
    }
    let mut iterates = vec![QueryVector::from_finite(x.clone())];
    let mut energies = vec![e];
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_iters {
        let next = iterate_unchecked(memory, &x, b);
        steps += 1;
        let e_next = energy_at(&next);
        if e_next > e + cfg.energy_slack {
            return Err(Error::EnergyIncrease {
                step: steps,
                before: e,
                after: e_next,
                slack: cfg.energy_slack,
            });
        }
        if e_next < bound {
            return Err(Error::BelowBound {
                step: steps,
                energy: e_next,
                bound,
            });
        }
        let moved = crate::models::sq_dist(&x, &next).sqrt();
        x = next;
        e = e_next;
        iterates.push(QueryVector::from_finite(x.clone()));
        energies.push(e);
        if moved <= cfg.step_tol {
            converged = true;
            break;
        }
    }
    Ok(Trajectory {
        iterates,
        energies,
        converged,
        steps,
    })
}

/// Checks `Σ_t ‖x^{t+1} - x^t‖² <= E(x^0) - E(x^T) + slack`.
pub fn summability_holds(trajectory: &Trajectory, slack: f64) -> bool {
    let moved: f64 = trajectory.step_norms().iter().map(|s| s * s).sum();
    match (trajectory.energies.first(), trajectory.energies.last()) {
        (Some(first), Some(last)) => moved <= first - last + slack,
        _ => true,
    }
}
