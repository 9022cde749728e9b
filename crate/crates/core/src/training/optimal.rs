//! Closed-form weights that make retrieval coincide with the MAP origin.

use crate::error::{check_finite, Error, Result};
use crate::types::{BaseConfig, BaseKind, UMode, WeightSet};

/// Weights whose score is `-Σ (ξ_i - x_i)^2 / σ_i`, the Gaussian log-likelihood up to constants.
///
/// Uses an unsorted distance footprint; the target per-dimension weights
/// `u_i = 1/σ_i` are recovered through suffix differences so that
/// `Uᵀ w = u` under the cumulative-sum matrix.
pub fn optimal_weights_noisy(sigma: &[f64]) -> Result<WeightSet> {
    if sigma.is_empty() {
        return Err(Error::Empty("sigma"));
    }
    if !sigma.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::Config("noise variances must be positive and finite".into()));
    }
    let u: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let d = u.len();
    let w = (0..d)
        .map(|i| if i + 1 == d { u[i] } else { u[i] - u[i + 1] })
        .collect();
    Ok(WeightSet {
        bases: vec![BaseConfig {
            base: BaseKind::Dis,
            w,
            beta: 1.0,
            sorted: false,
            u_mode: UMode::FixedTriangular,
        }],
    })
}

/// Bias for the unified score that recovers origins shifted by `drift`.
pub fn optimal_bias(drift: &[f64]) -> Result<Vec<f64>> {
    check_finite("drift", drift)?;
    Ok(drift.iter().map(|v| 2.0 * v).collect())
}
