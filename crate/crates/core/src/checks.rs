//! Self-verification suites: footprint vs enumeration, gradients vs finite
//! differences, closed-form optimal weights vs the likelihood oracle, and
//! energy descent properties.
//!
//! Every suite is seeded and returns one [`CheckRow`] per property, so reruns
//! can be compared byte for byte once written as CSV.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::synth_patterns;
use crate::energy::{descend, energy, energy_lower_bound, energy_rewritten, unified_scores, DescentConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{argmax, ModelConfig, PreparedModel};
use crate::similarity::{dimwise, footprint, k_optimal_bruteforce, match_count_scores};
use crate::training::{flatten_params, gradient, loss, optimal_bias, optimal_weights_noisy, unflatten_params};
use crate::types::{
    BaseConfig, BaseKind, SeparationKind, SquareMatrix, UMode, VariantSpec, WeightSet,
};
use crate::variants::{map_origin, sample_batch, RngState, StreamRange};

/// Outcome of one property over many cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation seen; its meaning depends on the check.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckRow {
    fn new(suite: &str, check: impl Into<String>, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            check: check.into(),
            cases: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
        }
    }

    /// Records one case with violation `v` (`<= tolerance` passes; NaN fails).
    fn record(&mut self, v: f64) {
        self.cases += 1;
        if !(v <= self.tolerance) {
            self.failures += 1;
        }
        if v > self.worst || v.is_nan() {
            self.worst = v;
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }
}

pub fn all_passed(rows: &[CheckRow]) -> bool {
    rows.iter().all(CheckRow::passed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Random (pattern, query) pairs per dimension and base.
    pub footprint_pairs: usize,
    pub footprint_min_d: usize,
    pub footprint_max_d: usize,
    pub gradient_instances: usize,
    pub gradient_max_n: usize,
    pub gradient_max_d: usize,
    pub gradient_max_batch: usize,
    pub likelihood_samples: usize,
    pub likelihood_n: usize,
    pub likelihood_d: usize,
}

impl OracleConfig {
    pub fn full() -> Self {
        Self {
            footprint_pairs: 1000,
            footprint_min_d: 2,
            footprint_max_d: 12,
            gradient_instances: 100,
            gradient_max_n: 32,
            gradient_max_d: 16,
            gradient_max_batch: 64,
            likelihood_samples: 10_000,
            likelihood_n: 256,
            likelihood_d: 16,
        }
    }

    pub fn quick() -> Self {
        Self {
            footprint_pairs: 100,
            footprint_max_d: 8,
            gradient_instances: 10,
            likelihood_samples: 1000,
            likelihood_n: 64,
            ..Self::full()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCheckConfig {
    pub trajectories: usize,
    pub n: usize,
    pub d: usize,
    pub max_bias_norm: f64,
    /// Half-width of the cube the starting points are drawn from.
    pub start_radius: f64,
    pub descent: DescentConfig,
    pub rewrite_tol: f64,
}

impl EnergyCheckConfig {
    pub fn full() -> Self {
        Self {
            trajectories: 100,
            n: 64,
            d: 16,
            max_bias_norm: 4.0,
            start_radius: 2.0,
            descent: DescentConfig::default(),
            rewrite_tol: 1e-9,
        }
    }

    pub fn quick() -> Self {
        Self {
            trajectories: 20,
            ..Self::full()
        }
    }
}

// Each suite draws from its own stream range so suites are independent of each other.
const FOOTPRINT_STREAMS: u64 = 1 << 40;
const GRADIENT_STREAMS: u64 = 2 << 40;
const LIKELIHOOD_STREAMS: u64 = 3 << 40;
const ENERGY_STREAMS: u64 = 4 << 40;

fn uniform_vec<R: Rng>(rng: &mut R, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-half_width..=half_width)).collect()
}

/// Sorted footprint entries against brute-force subset enumeration.
pub fn footprint_suite(cfg: &OracleConfig, seed: u64) -> Result<Vec<CheckRow>> {
    const TOL: f64 = 1e-9;
    let mut rows = Vec::new();
    for base in [BaseKind::Dis, BaseKind::Dot] {
        for d in cfg.footprint_min_d..=cfg.footprint_max_d {
            let stream0 = FOOTPRINT_STREAMS + ((d as u64) << 24) + ((base == BaseKind::Dot) as u64) * (1 << 20);
            let worst = exec::try_map_indexed(cfg.footprint_pairs, |i| {
                let mut rng = RngState::new(seed, stream0 + i as u64).rng();
                let xi = uniform_vec(&mut rng, d, 1.0);
                let x = uniform_vec(&mut rng, d, 1.5);
                let fp = footprint(&dimwise(base, &xi, &x)?.q, true)?;
                let mut worst = 0.0f64;
                for (k, f) in fp.iter().enumerate() {
                    let brute = k_optimal_bruteforce(base, &xi, &x, k + 1)?;
                    let e = (f - brute).abs();
                    worst = if e.is_nan() { e } else { worst.max(e) };
                }
                Ok::<_, Error>(worst)
            })?;
            let mut row = CheckRow::new("footprint", format!("{base:?} d={d}").to_lowercase(), TOL);
            worst.into_iter().for_each(|w| row.record(w));
            rows.push(row);
        }
    }
    Ok(rows)
}

fn random_weights<R: Rng>(rng: &mut R, d: usize) -> WeightSet {
    let bases = [BaseKind::Dis, BaseKind::Dot]
        .into_iter()
        .map(|base| {
            let u_mode = match rng.random_range(0..4) {
                0 => UMode::Identity,
                1 => {
                    let data = (0..d * d).map(|_| rng.random::<f64>()).collect();
                    UMode::Learnable(SquareMatrix::from_row_major(d, data).expect("finite entries"))
                }
                _ => UMode::FixedTriangular,
            };
            BaseConfig {
                base,
                w: uniform_vec(rng, d, 1.0 / d as f64),
                beta: rng.random_range(0.2..2.0),
                sorted: rng.random_bool(0.75),
                u_mode,
            }
        })
        .collect();
    WeightSet { bases }
}

/// Analytic loss gradient against central finite differences.
pub fn gradient_suite(cfg: &OracleConfig, seed: u64) -> Result<Vec<CheckRow>> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let mut row = CheckRow::new("gradient", "central differences", TOL);
    for i in 0..cfg.gradient_instances {
        let mut rng = RngState::new(seed, GRADIENT_STREAMS + ((i as u64) << 20)).rng();
        let n = rng.random_range(2..=cfg.gradient_max_n);
        let d = rng.random_range(2..=cfg.gradient_max_d);
        let batch_len = rng.random_range(1..=cfg.gradient_max_batch);
        let memory = synth_patterns(n, d, RngState::new(seed, GRADIENT_STREAMS + ((i as u64) << 20) + 1))?;
        let spec = VariantSpec::mixed(d, [0.25, 0.1, 0.1], &mut rng);
        let streams = StreamRange {
            seed,
            streams: GRADIENT_STREAMS + ((i as u64) << 20) + 2..GRADIENT_STREAMS + ((i as u64) << 20) + 2 + batch_len as u64,
        };
        let batch = sample_batch(&spec, &memory, &streams)?;
        let weights = random_weights(&mut rng, d);
        let analytic = gradient(&memory, &batch, &weights)?.flatten();
        let params = flatten_params(&weights);
        let mut probe = weights.clone();
        let mut worst = 0.0f64;
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] = params[j] + H;
            unflatten_params(&mut probe, &p);
            let up = loss(&memory, &batch, &probe)?;
            p[j] = params[j] - H;
            unflatten_params(&mut probe, &p);
            let down = loss(&memory, &batch, &probe)?;
            let numeric = (up - down) / (2.0 * H);
            let scale = 1f64.max(analytic[j].abs()).max(numeric.abs());
            let e = (analytic[j] - numeric).abs() / scale;
            worst = if e.is_nan() { e } else { worst.max(e) };
        }
        row.record(worst);
    }
    Ok(vec![row])
}

/// Optimal closed-form scores with argmax separation against the MAP oracle.
///
/// `worst` is the fraction of disagreeing samples.
pub fn likelihood_suite(cfg: &OracleConfig, seed: u64) -> Result<Vec<CheckRow>> {
    let (n, d, count) = (cfg.likelihood_n, cfg.likelihood_d, cfg.likelihood_samples);
    let memory = synth_patterns(n, d, RngState::new(seed, LIKELIHOOD_STREAMS))?;
    let mut rng = RngState::new(seed, LIKELIHOOD_STREAMS + 1).rng();
    let streams = |k: u64| StreamRange {
        seed,
        streams: LIKELIHOOD_STREAMS + (k << 32)..LIKELIHOOD_STREAMS + (k << 32) + count as u64,
    };
    let fraction = |row: &CheckRow, bad: usize| if row.cases == 0 { 0.0 } else { bad as f64 / row.cases as f64 };

    let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.25..=4.0)).collect();
    let spec = VariantSpec::noisy(sigma.clone());
    let model = ModelConfig::AHop {
        weights: optimal_weights_noisy(&sigma)?,
        separation: SeparationKind::Argmax,
    };
    let prepared = PreparedModel::new(&model, &memory)?;
    let samples = sample_batch(&spec, &memory, &streams(1))?;
    let agree = exec::try_map_indexed(samples.len(), |i| {
        let x = samples[i].query.as_slice();
        Ok::<_, Error>(argmax(&prepared.scores(x)) == map_origin(&spec, &memory, x)?)
    })?;
    let mut noisy = CheckRow::new("likelihood", "noisy", 0.0);
    noisy.cases = agree.len();
    noisy.failures = agree.iter().filter(|&&a| !a).count();
    noisy.worst = fraction(&noisy, noisy.failures);

    let spec = VariantSpec::masked(0.3);
    let samples = sample_batch(&spec, &memory, &streams(2))?;
    let outcome = exec::try_map_indexed(samples.len(), |i| {
        let x = samples[i].query.as_slice();
        let counts = match_count_scores(&memory, x, spec.match_tol)?;
        let best = argmax(&counts);
        let unique = counts.iter().filter(|&&c| c == counts[best]).count() == 1;
        unique.then(|| map_origin(&spec, &memory, x).map(|m| m == best)).transpose()
    })?;
    let mut masked = CheckRow::new("likelihood", "masked", 0.0);
    let decided: Vec<bool> = outcome.into_iter().flatten().collect();
    masked.cases = decided.len();
    masked.failures = decided.iter().filter(|&&a| !a).count();
    masked.worst = fraction(&masked, masked.failures);

    let drift = uniform_vec(&mut rng, d, 0.5);
    let spec = VariantSpec::biased(drift.clone());
    let b = optimal_bias(&drift)?;
    let samples = sample_batch(&spec, &memory, &streams(3))?;
    let agree = exec::try_map_indexed(samples.len(), |i| {
        let x = samples[i].query.as_slice();
        Ok::<_, Error>(argmax(&unified_scores(&memory, x, &b)?) == map_origin(&spec, &memory, x)?)
    })?;
    let mut biased = CheckRow::new("likelihood", "biased", 0.0);
    biased.cases = agree.len();
    biased.failures = agree.iter().filter(|&&a| !a).count();
    biased.worst = fraction(&biased, biased.failures);

    Ok(vec![noisy, masked, biased])
}

/// Footprint, gradient and likelihood suites in that order.
pub fn oracle_suite(cfg: &OracleConfig, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = footprint_suite(cfg, seed)?;
    rows.extend(gradient_suite(cfg, seed)?);
    rows.extend(likelihood_suite(cfg, seed)?);
    Ok(rows)
}

/// Descent trajectories from random starts and biases.
pub fn energy_suite(cfg: &EnergyCheckConfig, seed: u64) -> Result<Vec<CheckRow>> {
    cfg.descent.validate()?;
    let slack = cfg.descent.energy_slack;
    let mut monotone = CheckRow::new("energy", "monotone", slack);
    let mut bounded = CheckRow::new("energy", "lower bound", slack);
    let mut summable = CheckRow::new("energy", "summability", slack);
    let mut rewrite = CheckRow::new("energy", "rewrite identity", cfg.rewrite_tol);
    let mut converged = CheckRow::new("energy", "converged", 0.0);
    for i in 0..cfg.trajectories {
        let stream = ENERGY_STREAMS + ((i as u64) << 8);
        let memory = synth_patterns(cfg.n, cfg.d, RngState::new(seed, stream))?;
        let mut rng = RngState::new(seed, stream + 1).rng();
        let mut b: Vec<f64> = (0..cfg.d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = rng.random_range(0.0..=cfg.max_bias_norm);
        b.iter_mut().for_each(|v| *v *= radius / norm);
        let mut x0 = uniform_vec(&mut rng, cfg.d, cfg.start_radius);
        // Occasionally start exactly on a stored pattern.
        if rng.random_bool(0.1) {
            x0 = memory.column(rng.random_range(0..cfg.n)).to_vec();
        }
        let bound = energy_lower_bound(cfg.n, &b);
        let traj = match descend(&memory, &x0, &b, &cfg.descent) {
            Ok(t) => t,
            Err(Error::EnergyIncrease { before, after, .. }) => {
                monotone.record(after - before);
                continue;
            }
            Err(Error::BelowBound { energy, .. }) => {
                bounded.record(bound - energy);
                continue;
            }
            Err(e) => return Err(e),
        };
        let rises = traj.energies.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        monotone.record(rises.max(0.0));
        let below = traj.energies.iter().map(|e| bound - e).fold(f64::NEG_INFINITY, f64::max);
        bounded.record(below.max(0.0));
        let moved: f64 = traj.step_norms().iter().map(|s| s * s).sum();
        let drop = traj.energies[0] - traj.energies[traj.energies.len() - 1];
        summable.record((moved - drop).max(0.0));
        let mut worst = 0.0f64;
        for x in &traj.iterates {
            let e = (energy(&memory, x, &b)? - energy_rewritten(&memory, x, &b)?).abs();
            worst = if e.is_nan() { e } else { worst.max(e) };
        }
        rewrite.record(worst);
        converged.record(if traj.converged { 0.0 } else { 1.0 });
    }
    Ok(vec![monotone, bounded, summable, rewrite, converged])
}
