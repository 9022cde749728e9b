//! Variant samplers, exact likelihoods and the MAP origin oracle.

use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, Error, Result};
use crate::exec;
use crate::types::{MemoryMatrix, QueryVector, VariantKind, VariantSample, VariantSpec};

/// A seeded, independently addressable random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// A contiguous block of streams under one seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamRange {
    pub seed: u64,
    pub streams: Range<u64>,
}

impl StreamRange {
    pub fn len(&self) -> usize {
        (self.streams.end - self.streams.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// The `i`-th stream of the block.
    pub fn state(&self, i: usize) -> RngState {
        assert!(i < self.len(), "stream {i} outside block of {}", self.len());
        RngState::new(self.seed, self.streams.start + i as u64)
    }

    pub fn overlaps(&self, other: &StreamRange) -> bool {
        self.seed == other.seed
            && self.streams.start < other.streams.end
            && other.streams.start < self.streams.end
    }
}

/// Hands out non-overlapping stream blocks and remembers them for auditing.
#[derive(Clone, Debug)]
pub struct StreamAllocator {
    seed: u64,
    next: u64,
    end: u64,
    issued: Vec<StreamRange>,
}

impl StreamAllocator {
    /// Allocates from `[base, base + capacity)` under `seed`.
    pub fn new(seed: u64, base: u64, capacity: u64) -> Self {
        Self {
            seed,
            next: base,
            end: base + capacity,
            issued: Vec::new(),
        }
    }

    pub fn allocate(&mut self, len: usize) -> StreamRange {
        let start = self.next;
        let end = start + len as u64;
        assert!(end <= self.end, "stream space exhausted");
        self.next = end;
        let range = StreamRange {
            seed: self.seed,
            streams: start..end,
        };
        self.issued.push(range.clone());
        range
    }

    pub fn single(&mut self) -> RngState {
        self.allocate(1).state(0)
    }

    /// True when no two issued blocks share a stream.
    pub fn all_disjoint(&self) -> bool {
        self.issued
            .iter()
            .enumerate()
            .all(|(i, a)| self.issued[i + 1..].iter().all(|b| !a.overlaps(b)))
    }
}

/// Draws one `(origin, query)` pair.
pub fn sample(spec: &VariantSpec, memory: &MemoryMatrix, rng: RngState) -> Result<VariantSample> {
    spec.validate(memory.d())?;
    Ok(sample_unchecked(spec, memory, rng))
}

/// Draws one pair per stream in `streams`, in stream order.
pub fn sample_batch(spec: &VariantSpec, memory: &MemoryMatrix, streams: &StreamRange) -> Result<Vec<VariantSample>> {
    spec.validate(memory.d())?;
    Ok(exec::map_indexed(streams.len(), |i| {
        sample_unchecked(spec, memory, streams.state(i))
    }))
}

fn sample_unchecked(spec: &VariantSpec, memory: &MemoryMatrix, state: RngState) -> VariantSample {
    let mut rng = state.rng();
    let origin = rng.random_range(0..memory.n());
    let xi = memory.column(origin);
    let d = xi.len();
    let mut x = xi.to_vec();
    match spec.kind {
        VariantKind::Noisy => {
            for (i, v) in x.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.sigma_at(i).sqrt() * z;
            }
        }
        VariantKind::Masked => {
            for v in &mut x {
                if rng.random::<f64>() < spec.p_masked {
                    *v = rng.random_range(spec.mask_low..spec.mask_high);
                }
            }
        }
        VariantKind::Biased => {
            for (v, b) in x.iter_mut().zip(&spec.drift) {
                *v += b;
            }
        }
        VariantKind::Mixed => {
            let scale = spec.d_noise().sqrt();
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v += scale * z;
            }
            let m = spec.mixed_mask_count(d);
            for i in index::sample(&mut rng, d, m) {
                x[i] = rng.random_range(spec.mask_low..spec.mask_high);
            }
            for (v, b) in x.iter_mut().zip(&spec.drift) {
                *v += b;
            }
        }
    }
    VariantSample {
        origin,
        query: QueryVector::from_finite(x),
    }
}

/// `ln p(query | pattern)` under the variant distribution; may be `-inf`.
pub fn log_likelihood(spec: &VariantSpec, query: &[f64], pattern: &[f64]) -> Result<f64> {
    let d = pattern.len();
    crate::error::check_len("query", d, query.len())?;
    check_finite("query", query)?;
    spec.validate(d)?;
    match spec.kind {
        VariantKind::Noisy => {
            let mut acc = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
            for (i, (&x, &p)) in query.iter().zip(pattern).enumerate() {
                let s = spec.sigma_at(i);
                acc -= 0.5 * s.ln() + 0.5 * (x - p) * (x - p) / s;
            }
            Ok(acc)
        }
        VariantKind::Masked => {
            let changed = query
                .iter()
                .zip(pattern)
                .filter(|(&x, &p)| (x - p).abs() > spec.match_tol)
                .count();
            let kept = d - changed;
            let per_changed = spec.p_masked.ln() + spec.mask_density().ln();
            // 0 * ln 0 counts as 0 so that p_masked = 0 with no changes gives 0.
            let a = if changed == 0 { 0.0 } else { changed as f64 * per_changed };
            let b = if kept == 0 { 0.0 } else { kept as f64 * (1.0 - spec.p_masked).ln() };
            Ok(a + b)
        }
        VariantKind::Biased => {
            let hit = query
                .iter()
                .zip(pattern)
                .zip(&spec.drift)
                .all(|((&x, &p), &b)| (x - p - b).abs() <= spec.match_tol);
            Ok(if hit { 0.0 } else { f64::NEG_INFINITY })
        }
        VariantKind::Mixed => Err(Error::UnsupportedLikelihood("mixed")),
    }
}

/// Maximum-a-posteriori origin under a uniform prior; lowest index wins ties.
pub fn map_origin(spec: &VariantSpec, memory: &MemoryMatrix, query: &[f64]) -> Result<usize> {
    if spec.kind == VariantKind::Mixed {
        return Err(Error::UnsupportedLikelihood("mixed"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, col) in memory.columns().enumerate() {
        let ll = log_likelihood(spec, query, col)?;
        if ll > best.1 {
            best = (k, ll);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem() -> MemoryMatrix {
        MemoryMatrix::from_columns(&[vec![0.1, -0.2, 0.3], vec![0.5, 0.5, -0.5], vec![-0.9, 0.0, 0.4]]).unwrap()
    }

    #[test]
    fn degenerate_noise_reproduces_pattern() {
        let m = mem();
        let s = sample(&VariantSpec::noisy_isotropic(1e-30), &m, RngState::new(1, 0)).unwrap();
        for (a, b) in s.query.iter().zip(m.column(s.origin)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn biased_offset_is_exact() {
        let m = mem();
        let spec = VariantSpec::biased(vec![0.3; 3]);
        for i in 0..50 {
            let s = sample(&spec, &m, RngState::new(3, i)).unwrap();
            for (a, b) in s.query.iter().zip(m.column(s.origin)) {
                assert_eq!(*a, b + 0.3);
            }
        }
    }

    #[test]
    fn zero_mixed_is_identity() {
        let m = mem();
        let spec = VariantSpec::mixed_with_signs([0.0; 3], vec![1, -1, 1]);
        for i in 0..50 {
            let s = sample(&spec, &m, RngState::new(5, i)).unwrap();
            assert_eq!(s.query.as_slice(), m.column(s.origin));
        }
    }

    #[test]
    fn likelihood_examples() {
        let noisy = VariantSpec::noisy_isotropic(1.0);
        let ll = log_likelihood(&noisy, &[0.7], &[0.7]).unwrap();
        assert!((ll - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
        assert!((ll + 0.918939).abs() < 1e-6);

        let biased = VariantSpec::biased(vec![0.25, -0.5]);
        assert_eq!(log_likelihood(&biased, &[0.25, -0.5], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(
            log_likelihood(&biased, &[0.25 + 1e-6, -0.5], &[0.0, 0.0]).unwrap(),
            f64::NEG_INFINITY
        );

        // g = 1/(high - low) = 0.5
        let masked = VariantSpec::masked(0.5);
        let ll = log_likelihood(&masked, &[0.3, 0.9], &[0.3, 0.1]).unwrap();
        assert!((ll - 3.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((ll + 2.0794).abs() < 1e-4);

        let mixed = VariantSpec::mixed_with_signs([0.1; 3], vec![1, 1]);
        assert!(matches!(
            log_likelihood(&mixed, &[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::UnsupportedLikelihood(_))
        ));
    }

    #[test]
    fn map_origin_examples() {
        let m = mem();
        let noisy = VariantSpec::noisy_isotropic(0.5);
        for k in 0..3 {
            assert_eq!(map_origin(&noisy, &m, m.column(k)).unwrap(), k);
        }
        let drift = vec![0.1, 0.1, -0.1];
        let biased = VariantSpec::biased(drift.clone());
        let x: Vec<f64> = m.column(2).iter().zip(&drift).map(|(a, b)| a + b).collect();
        assert_eq!(map_origin(&biased, &m, &x).unwrap(), 2);
    }

    #[test]
    fn allocator_blocks_are_disjoint() {
        let mut a = StreamAllocator::new(9, 100, 1000);
        let r1 = a.allocate(10);
        let r2 = a.allocate(5);
        assert!(!r1.overlaps(&r2));
        assert_eq!(r2.state(0).stream, 110);
        assert!(a.all_disjoint());
    }

    #[test]
    fn streams_are_reproducible() {
        let m = mem();
        let spec = VariantSpec::mixed_with_signs([0.4, 0.4, 0.4], vec![1, -1, 1]);
        let a = sample(&spec, &m, RngState::new(11, 4)).unwrap();
        let b = sample(&spec, &m, RngState::new(11, 4)).unwrap();
        let c = sample(&spec, &m, RngState::new(11, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
