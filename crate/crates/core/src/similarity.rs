//! Dimension-wise similarities, footprints and adaptive scores.

use itertools::Itertools;

use crate::error::{check_finite, check_len, Error, Result};
use crate::types::{BaseKind, MemoryMatrix, WeightSet};

/// Largest dimension accepted by [`k_optimal_bruteforce`].
pub const MAX_ENUMERATION_DIM: usize = 20;

/// Per-dimension similarity between a pattern and a query.
#[derive(Clone, Debug, PartialEq)]
pub struct DimwiseVector {
    pub q: Vec<f64>,
    pub base: BaseKind,
}

#[inline]
pub(crate) fn dimwise_entry(base: BaseKind, p: f64, x: f64) -> f64 {
    match base {
        BaseKind::Dis => -(p - x) * (p - x),
        BaseKind::Dot => p * x,
    }
}

pub fn dimwise(base: BaseKind, pattern: &[f64], query: &[f64]) -> Result<DimwiseVector> {
    check_len("query", pattern.len(), query.len())?;
    check_finite("pattern", pattern)?;
    check_finite("query", query)?;
    let q = pattern
        .iter()
        .zip(query)
        .map(|(&p, &x)| dimwise_entry(base, p, x))
        .collect();
    Ok(DimwiseVector { q, base })
}

/// Sorts in descending order; equal entries keep their original order.
pub fn sort_descending(q: &mut [f64]) {
    q.sort_by(|a, b| b.total_cmp(a));
}

/// Cumulative sums of `q`, after a descending sort when `sorted` is set.
///
/// With `sorted`, entry `k` (zero-based) is the best achievable similarity
/// over any `k + 1` coordinates.
pub fn footprint(q: &[f64], sorted: bool) -> Result<Vec<f64>> {
    check_finite("dimension-wise vector", q)?;
    let mut v = q.to_vec();
    if sorted {
        sort_descending(&mut v);
    }
    let mut acc = 0.0;
    for e in &mut v {
        acc += *e;
        *e = acc;
    }
    Ok(v)
}

/// Maximum of `Σ_{i∈D} q_i` over all index sets `D` of size `k`, by enumeration.
pub fn k_optimal_bruteforce(base: BaseKind, pattern: &[f64], query: &[f64], k: usize) -> Result<f64> {
    let d = pattern.len();
    if d > MAX_ENUMERATION_DIM {
        return Err(Error::EnumerationGuard {
            d,
            max: MAX_ENUMERATION_DIM,
        });
    }
    if k == 0 || k > d {
        return Err(Error::Config(format!("subset size must lie in 1..={d}, got {k}")));
    }
    let q = dimwise(base, pattern, query)?.q;
    let best = (0..d)
        .combinations(k)
        .map(|subset| subset.iter().map(|&i| q[i]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

/// Integer key whose ascending order is the descending `total_cmp` order of `v`.
#[inline]
fn descending_key(v: f64) -> u64 {
    let b = v.to_bits();
    let sign_mask = (((b as i64) >> 63) as u64) | (1 << 63);
    !(b ^ sign_mask)
}

#[inline]
fn from_descending_key(k: u64) -> f64 {
    let t = !k;
    let b = if t >> 63 == 1 { t ^ (1 << 63) } else { !t };
    f64::from_bits(b)
}

/// Writes the (optionally sorted) dimension-wise vector into `out`.
///
/// Used on hot paths. Sorting integer keys is a bijection on bit patterns, so
/// the result equals the stable descending sort value for value.
#[inline]
pub(crate) fn features_into(base: BaseKind, sorted: bool, pattern: &[f64], query: &[f64], out: &mut [f64]) {
    if !sorted {
        for ((o, &p), &x) in out.iter_mut().zip(pattern).zip(query) {
            *o = dimwise_entry(base, p, x);
        }
        return;
    }
    let keys: &mut [u64] = bytemuck::cast_slice_mut(out);
    for ((k, &p), &x) in keys.iter_mut().zip(pattern).zip(query) {
        *k = descending_key(dimwise_entry(base, p, x));
    }
    keys.sort_unstable();
    for k in keys.iter_mut() {
        *k = from_descending_key(*k).to_bits();
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adaptive similarity of the query against every stored pattern.
pub fn adaptive_scores(memory: &MemoryMatrix, query: &[f64], weights: &WeightSet) -> Result<Vec<f64>> {
    memory.check_query("query", query)?;
    check_finite("query", query)?;
    weights.validate(memory.d())?;
    Ok(AdaptiveScorer::new(weights).scores(memory, query))
}

/// Precomputed effective weights `β_b Mᵀ w_b` for repeated scoring.
pub(crate) struct AdaptiveScorer {
    terms: Vec<(BaseKind, bool, Vec<f64>)>,
}

impl AdaptiveScorer {
    pub(crate) fn new(weights: &WeightSet) -> Self {
        let terms = weights
            .bases
            .iter()
            .map(|b| {
                let u = b.effective_weights().into_iter().map(|v| v * b.beta).collect();
                (b.base, b.sorted, u)
            })
            .collect();
        Self { terms }
    }

    pub(crate) fn scores(&self, memory: &MemoryMatrix, query: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; memory.d()];
        memory
            .columns()
            .map(|col| {
                self.terms
                    .iter()
                    .map(|(base, sorted, u)| {
                        features_into(*base, *sorted, col, query, &mut buf);
                        dot(u, &buf)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Number of dimensions where pattern and query agree within `tol`.
pub fn match_count_scores(memory: &MemoryMatrix, query: &[f64], tol: f64) -> Result<Vec<f64>> {
    memory.check_query("query", query)?;
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("match tolerance must be >= 0, got {tol}")));
    }
    Ok(memory
        .columns()
        .map(|col| {
            col.iter()
                .zip(query)
                .filter(|(&p, &x)| (p - x).abs() <= tol)
                .count() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BaseConfig, UMode};

    #[test]
    fn dimwise_examples() {
        let q = dimwise(BaseKind::Dis, &[1.0, 2.0, 3.0], &[1.0, 0.0, 3.0]).unwrap();
        assert_eq!(q.q, vec![0.0, -4.0, 0.0]);
        let q = dimwise(BaseKind::Dot, &[1.0, -1.0], &[2.0, 3.0]).unwrap();
        assert_eq!(q.q, vec![2.0, -3.0]);
        let q = dimwise(BaseKind::Dis, &[0.5, -0.25], &[0.5, -0.25]).unwrap();
        assert!(q.q.iter().all(|&v| v == 0.0));
        assert!(matches!(
            dimwise(BaseKind::Dot, &[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn footprint_examples() {
        assert_eq!(footprint(&[-4.0, 0.0, -1.0], true).unwrap(), vec![0.0, -1.0, -5.0]);
        assert_eq!(footprint(&[-4.0, 0.0, -1.0], false).unwrap(), vec![-4.0, -4.0, -5.0]);
        assert_eq!(footprint(&[0.0; 4], true).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn bruteforce_examples() {
        let (p, x) = ([1.0, 2.0, 3.0], [1.0, 0.0, 3.0]);
        assert_eq!(k_optimal_bruteforce(BaseKind::Dis, &p, &x, 1).unwrap(), 0.0);
        assert_eq!(k_optimal_bruteforce(BaseKind::Dis, &p, &x, 3).unwrap(), -4.0);
        assert_eq!(
            k_optimal_bruteforce(BaseKind::Dot, &[1.0, -1.0], &[2.0, 3.0], 2).unwrap(),
            -1.0
        );
        let big = vec![0.0; 21];
        assert!(matches!(
            k_optimal_bruteforce(BaseKind::Dis, &big, &big, 1),
            Err(Error::EnumerationGuard { d: 21, .. })
        ));
    }

    #[test]
    fn adaptive_score_example() {
        let mem = MemoryMatrix::from_columns(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let weights = WeightSet {
            bases: vec![BaseConfig {
                w: vec![1.0, 0.0, 0.0],
                ..BaseConfig::degenerate(BaseKind::Dis, 3)
            }],
        };
        // Footprints are (0, 0, -4) and (0, -1, -10); w picks the first entry of each.
        let s = adaptive_scores(&mem, &[1.0, 0.0, 3.0], &weights).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let second = WeightSet {
            bases: vec![BaseConfig {
                w: vec![0.0, 1.0, 0.0],
                ..weights.bases[0].clone()
            }],
        };
        assert_eq!(adaptive_scores(&mem, &[1.0, 0.0, 3.0], &second).unwrap(), vec![0.0, -1.0]);
    }

    #[test]
    fn degenerate_weights_give_base_similarity() {
        let mem = MemoryMatrix::from_columns(&[vec![0.5, -0.5], vec![0.25, 1.0]]).unwrap();
        let x = [0.0, 0.75];
        let s = adaptive_scores(&mem, &x, &WeightSet::single(BaseKind::Dis, 2)).unwrap();
        assert_eq!(s, vec![-(0.25 + 1.5625), -(0.0625 + 0.0625)]);
        let s = adaptive_scores(&mem, &x, &WeightSet::single(BaseKind::Dot, 2)).unwrap();
        assert_eq!(s, vec![-0.375, 0.75]);
    }

    #[test]
    fn explicit_matrix_matches_triangular() {
        let mem = MemoryMatrix::from_columns(&[vec![0.1, -0.7, 0.3], vec![0.9, 0.2, -0.4]]).unwrap();
        let x = [0.2, 0.1, -0.5];
        let tri = WeightSet {
            bases: vec![BaseConfig {
                w: vec![0.3, -1.0, 2.0],
                beta: 0.7,
                ..BaseConfig::degenerate(BaseKind::Dot, 3)
            }],
        };
        let mut explicit = tri.clone();
        explicit.bases[0].u_mode = UMode::Fixed(crate::types::SquareMatrix::lower_triangular_ones(3));
        let a = adaptive_scores(&mem, &x, &tri).unwrap();
        let b = adaptive_scores(&mem, &x, &explicit).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn descending_keys_follow_total_order() {
        let vals = [
            f64::NEG_INFINITY,
            -3.5,
            -f64::MIN_POSITIVE,
            -0.0,
            0.0,
            1e-300,
            2.0,
            f64::MAX,
            f64::INFINITY,
        ];
        for w in vals.windows(2) {
            assert!(descending_key(w[0]) > descending_key(w[1]), "{} {}", w[0], w[1]);
        }
        for v in vals {
            assert_eq!(from_descending_key(descending_key(v)).to_bits(), v.to_bits());
        }
        let (p, x) = ([0.3, -1.0, 0.7, 0.0, 0.5], [-0.2, -1.0, 0.9, -0.0, 0.5]);
        for base in [BaseKind::Dis, BaseKind::Dot] {
            let mut fast = [0.0; 5];
            features_into(base, true, &p, &x, &mut fast);
            let mut slow = dimwise(base, &p, &x).unwrap().q;
            sort_descending(&mut slow);
            assert_eq!(fast.map(f64::to_bits).to_vec(), slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn match_count_examples() {
        let mem = MemoryMatrix::from_columns(&[vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 3.0]]).unwrap();
        assert_eq!(match_count_scores(&mem, &[1.0, 0.0, 3.0], 0.0).unwrap(), vec![2.0, 3.0]);
        let mem = MemoryMatrix::from_columns(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(match_count_scores(&mem, &[5.0, 6.0], 0.0).unwrap(), vec![0.0]);
    }
}
