//! Single-step retrieval `y = Ξ sep(scores(Ξ, x))` for A-Hop and baselines.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::similarity::{dot, AdaptiveScorer};
use crate::types::{MemoryMatrix, QueryVector, SeparationKind, WeightSet};

/// Projection `Φ` of a kernelized network, `rows × cols` with `cols = d`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Kernel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("kernel"));
        }
        check_len("kernel data", rows * cols, data.len())?;
        check_finite("kernel", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Self { rows: d, cols: d, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `Φ v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|row| dot(row, v)).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Kernel {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_len("kernel row", c, row.len())?;
            data.extend(row);
        }
        Self::new(r, c, data)
    }
}

impl From<Kernel> for Vec<Vec<f64>> {
    fn from(k: Kernel) -> Self {
        k.data.chunks_exact(k.cols).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelConfig {
    /// Adaptive similarity.
    AHop {
        weights: WeightSet,
        separation: SeparationKind,
    },
    /// Scaled dot product.
    MHop { beta: f64, separation: SeparationKind },
    /// Negative L1 distance with argmax separation.
    UHop,
    /// Dot product in a learned projection space.
    K2Hop {
        kernel: Kernel,
        beta: f64,
        separation: SeparationKind,
    },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::AHop { .. } => "A-Hop",
            ModelConfig::MHop { .. } => "M-Hop",
            ModelConfig::UHop => "U-Hop",
            ModelConfig::K2Hop { .. } => "K2-Hop",
        }
    }

    pub fn separation(&self) -> SeparationKind {
        match self {
            ModelConfig::AHop { separation, .. }
            | ModelConfig::MHop { separation, .. }
            | ModelConfig::K2Hop { separation, .. } => *separation,
            ModelConfig::UHop => SeparationKind::Argmax,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ModelConfig::AHop { weights, .. } => weights.validate(d),
            ModelConfig::MHop { beta, .. } => check_beta(*beta),
            ModelConfig::UHop => Ok(()),
            ModelConfig::K2Hop { kernel, beta, .. } => {
                check_len("kernel columns", d, kernel.cols())?;
                check_beta(*beta)
            }
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be positive and finite, got {beta}")))
    }
}

/// Numerically stable `ln Σ exp(s_k)`.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn separation(scores: &[f64], kind: SeparationKind) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_finite("scores", scores)?;
    Ok(separate(scores, kind))
}

pub(crate) fn separate(scores: &[f64], kind: SeparationKind) -> Vec<f64> {
    match kind {
        SeparationKind::Softmax => {
            let lse = log_sum_exp(scores);
            scores.iter().map(|s| (s - lse).exp()).collect()
        }
        SeparationKind::Argmax => {
            let mut p = vec![0.0; scores.len()];
            p[argmax(scores)] = 1.0;
            p
        }
    }
}

/// A model bound to one memory, with per-memory work done once.
pub struct PreparedModel<'a> {
    memory: &'a MemoryMatrix,
    scorer: Scorer,
    separation: SeparationKind,
}

enum Scorer {
    Adaptive(AdaptiveScorer),
    Dot(f64),
    L1,
    Kernel {
        kernel: Kernel,
        beta: f64,
        // Projected memory, one row of length `rows` per pattern.
        projected: Vec<f64>,
    },
}

impl<'a> PreparedModel<'a> {
    pub fn new(config: &ModelConfig, memory: &'a MemoryMatrix) -> Result<Self> {
        config.validate(memory.d())?;
        let scorer = match config {
            ModelConfig::AHop { weights, .. } => Scorer::Adaptive(AdaptiveScorer::new(weights)),
            ModelConfig::MHop { beta, .. } => Scorer::Dot(*beta),
            ModelConfig::UHop => Scorer::L1,
            ModelConfig::K2Hop { kernel, beta, .. } => Scorer::Kernel {
                kernel: kernel.clone(),
                beta: *beta,
                projected: memory.columns().flat_map(|c| kernel.apply(c)).collect(),
            },
        };
        Ok(Self {
            memory,
            scorer,
            separation: config.separation(),
        })
    }

    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let mem = self.memory;
        match &self.scorer {
            Scorer::Adaptive(s) => s.scores(mem, query),
            Scorer::Dot(beta) => mem.columns().map(|c| beta * dot(c, query)).collect(),
            Scorer::L1 => mem
                .columns()
                .map(|c| -c.iter().zip(query).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .collect(),
            Scorer::Kernel {
                kernel,
                beta,
                projected,
            } => {
                let px = kernel.apply(query);
                projected
                    .chunks_exact(kernel.rows())
                    .map(|pk| beta * dot(pk, &px))
                    .collect()
            }
        }
    }

    pub fn retrieve(&self, query: &[f64]) -> Result<QueryVector> {
        self.memory.check_query("query", query)?;
        check_finite("query", query)?;
        let scores = self.scores(query);
        check_finite("scores", &scores)?;
        let p = separate(&scores, self.separation);
        Ok(QueryVector::from_finite(self.memory.combine(&p)))
    }
}

pub fn retrieve(config: &ModelConfig, memory: &MemoryMatrix, query: &[f64]) -> Result<QueryVector> {
    PreparedModel::new(config, memory)?.retrieve(query)
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stored pattern closest to `y` in Euclidean distance; lowest index wins ties.
pub fn nearest_pattern(memory: &MemoryMatrix, y: &[f64]) -> Result<usize> {
    memory.check_query("retrieved vector", y)?;
    check_finite("retrieved vector", y)?;
    let mut best = (0, f64::INFINITY);
    for (k, col) in memory.columns().enumerate() {
        let dist = sq_dist(col, y);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BaseKind;

    #[test]
    fn separation_examples() {
        assert_eq!(separation(&[0.0, 0.0], SeparationKind::Softmax).unwrap(), vec![0.5, 0.5]);
        let p = separation(&[1000.0, 0.0], SeparationKind::Softmax).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert_eq!(
            separation(&[3.0, 7.0, 7.0], SeparationKind::Argmax).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert!(matches!(separation(&[], SeparationKind::Softmax), Err(Error::Empty(_))));
    }

    #[test]
    fn single_pattern_is_always_returned() {
        let mem = MemoryMatrix::from_columns(&[vec![0.3, -0.6]]).unwrap();
        let configs = [
            ModelConfig::UHop,
            ModelConfig::MHop {
                beta: 1.0,
                separation: SeparationKind::Softmax,
            },
            ModelConfig::AHop {
                weights: WeightSet::adaptive(2),
                separation: SeparationKind::Softmax,
            },
            ModelConfig::K2Hop {
                kernel: Kernel::identity(2),
                beta: 1.0,
                separation: SeparationKind::Softmax,
            },
        ];
        for c in &configs {
            assert_eq!(retrieve(c, &mem, &[5.0, 5.0]).unwrap().as_slice(), &[0.3, -0.6]);
        }
    }

    #[test]
    fn uhop_picks_l1_nearest() {
        let mem = MemoryMatrix::from_columns(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(retrieve(&ModelConfig::UHop, &mem, &[0.1, 0.0]).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sharp_mhop_matches_argmax() {
        let mem = MemoryMatrix::from_columns(&[vec![0.2, 0.1], vec![-0.3, 0.9], vec![0.8, -0.1]]).unwrap();
        let x = [0.5, 0.3];
        let sharp = ModelConfig::MHop {
            beta: 1e4,
            separation: SeparationKind::Softmax,
        };
        let hard = ModelConfig::MHop {
            beta: 1.0,
            separation: SeparationKind::Argmax,
        };
        let a = retrieve(&sharp, &mem, &x).unwrap();
        let b = retrieve(&hard, &mem, &x).unwrap();
        assert!(sq_dist(&a, &b) < 1e-20);
    }

    #[test]
    fn degenerate_ahop_argmax_is_nearest_neighbor() {
        let mem = MemoryMatrix::from_columns(&[vec![0.2, 0.1], vec![-0.3, 0.9], vec![0.8, -0.1]]).unwrap();
        let cfg = ModelConfig::AHop {
            weights: WeightSet::single(BaseKind::Dis, 2),
            separation: SeparationKind::Argmax,
        };
        let x = [0.5, 0.3];
        let y = retrieve(&cfg, &mem, &x).unwrap();
        assert_eq!(y.as_slice(), mem.column(nearest_pattern(&mem, &x).unwrap()));
    }

    #[test]
    fn nearest_pattern_ties_go_low() {
        let mem = MemoryMatrix::from_columns(&[vec![5.0], vec![-1.0], vec![9.0], vec![1.0]]).unwrap();
        assert_eq!(nearest_pattern(&mem, &[0.0]).unwrap(), 1);
        assert_eq!(nearest_pattern(&mem, &[9.0]).unwrap(), 2);
    }

    #[test]
    fn model_json_round_trip() {
        let cfg = ModelConfig::K2Hop {
            kernel: Kernel::identity(2),
            beta: 0.5,
            separation: SeparationKind::Softmax,
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), cfg);
    }
}
