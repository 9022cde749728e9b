use ahop::similarity::{adaptive_scores, dimwise, footprint, k_optimal_bruteforce, match_count_scores};
use ahop::types::{BaseConfig, BaseKind, MemoryMatrix, SquareMatrix, UMode, WeightSet};
use proptest::prelude::*;

fn base() -> impl Strategy<Value = BaseKind> {
    prop_oneof![Just(BaseKind::Dis), Just(BaseKind::Dot)]
}

/// A pattern and a query of the same dimension, entries in `[-1, 1]`.
fn pair(max_d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_d).prop_flat_map(|d| {
        (
            prop::collection::vec(-1.0..=1.0f64, d),
            prop::collection::vec(-1.0..=1.0f64, d),
        )
    })
}

fn memory_and_query(max_n: usize, max_d: usize) -> impl Strategy<Value = (MemoryMatrix, Vec<f64>)> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-1.0..=1.0f64, n * d)
                .prop_map(move |data| MemoryMatrix::new(d, n, data).unwrap()),
            prop::collection::vec(-1.0..=1.0f64, d),
        )
    })
}

proptest! {
    #[test]
    fn sorted_footprint_is_the_best_subset_sum(b in base(), (p, x) in pair(8)) {
        let q = dimwise(b, &p, &x).unwrap().q;
        let f = footprint(&q, true).unwrap();
        for k in 1..=p.len() {
            let best = k_optimal_bruteforce(b, &p, &x, k).unwrap();
            prop_assert!((f[k - 1] - best).abs() <= 1e-9, "k={k}: {} vs {best}", f[k - 1]);
        }
    }

    #[test]
    fn sorted_footprint_ignores_coordinate_order(b in base(), (p, x) in pair(10), shift in 0usize..10) {
        let d = p.len();
        let rot = |v: &[f64]| (0..d).map(|i| v[(i + shift) % d]).collect::<Vec<_>>();
        let a = footprint(&dimwise(b, &p, &x).unwrap().q, true).unwrap();
        let r = footprint(&dimwise(b, &rot(&p), &rot(&x)).unwrap().q, true).unwrap();
        for (u, v) in a.iter().zip(&r) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn sorted_footprint_increments_do_not_increase(b in base(), (p, x) in pair(12)) {
        let f = footprint(&dimwise(b, &p, &x).unwrap().q, true).unwrap();
        let steps: Vec<f64> = std::iter::once(f[0]).chain(f.windows(2).map(|w| w[1] - w[0])).collect();
        for w in steps.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn last_footprint_entry_is_the_base_similarity(b in base(), (p, x) in pair(12), sorted in any::<bool>()) {
        let f = footprint(&dimwise(b, &p, &x).unwrap().q, sorted).unwrap();
        let full: f64 = match b {
            BaseKind::Dis => -p.iter().zip(&x).map(|(a, c)| (a - c) * (a - c)).sum::<f64>(),
            BaseKind::Dot => p.iter().zip(&x).map(|(a, c)| a * c).sum(),
        };
        prop_assert!((f[p.len() - 1] - full).abs() <= 1e-12);
    }

    #[test]
    fn degenerate_weights_score_the_base_similarity((m, x) in memory_and_query(6, 8)) {
        for b in [BaseKind::Dis, BaseKind::Dot] {
            let s = adaptive_scores(&m, &x, &WeightSet::single(b, m.d())).unwrap();
            for (k, col) in m.columns().enumerate() {
                let q = dimwise(b, col, &x).unwrap().q;
                prop_assert!((s[k] - q.iter().sum::<f64>()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_linear_in_the_weights(
        (m, x) in memory_and_query(5, 6),
        coeffs in prop::collection::vec(-2.0..2.0f64, 12),
        c in -3.0..3.0f64,
    ) {
        let d = m.d();
        let mk = |w: &[f64]| WeightSet { bases: vec![BaseConfig { w: w.to_vec(), ..BaseConfig::degenerate(BaseKind::Dis, d) }] };
        let w1 = &coeffs[..d];
        let w2 = &coeffs[6..6 + d];
        let mix: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a + c * b).collect();
        let s1 = adaptive_scores(&m, &x, &mk(w1)).unwrap();
        let s2 = adaptive_scores(&m, &x, &mk(w2)).unwrap();
        let sm = adaptive_scores(&m, &x, &mk(&mix)).unwrap();
        for k in 0..m.n() {
            prop_assert!((sm[k] - (s1[k] + c * s2[k])).abs() <= 1e-9);
        }
    }

    #[test]
    fn explicit_triangular_matrix_matches_the_builtin(
        (m, x) in memory_and_query(5, 7),
        w in prop::collection::vec(-1.0..1.0f64, 7),
        beta in 0.1..3.0f64,
        sorted in any::<bool>(),
    ) {
        let d = m.d();
        let term = |u_mode| BaseConfig { base: BaseKind::Dot, w: w[..d].to_vec(), beta, sorted, u_mode };
        let builtin = WeightSet { bases: vec![term(UMode::FixedTriangular)] };
        let explicit = WeightSet { bases: vec![term(UMode::Fixed(SquareMatrix::lower_triangular_ones(d)))] };
        let a = adaptive_scores(&m, &x, &builtin).unwrap();
        let b = adaptive_scores(&m, &x, &explicit).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_mixing_weights_the_raw_entries((m, x) in memory_and_query(4, 6), w in prop::collection::vec(-1.0..1.0f64, 6)) {
        let d = m.d();
        let ws = WeightSet { bases: vec![BaseConfig { base: BaseKind::Dis, w: w[..d].to_vec(), beta: 1.0, sorted: false, u_mode: UMode::Identity }] };
        let s = adaptive_scores(&m, &x, &ws).unwrap();
        for (k, col) in m.columns().enumerate() {
            let q = dimwise(BaseKind::Dis, col, &x).unwrap().q;
            let direct: f64 = q.iter().zip(&w[..d]).map(|(a, b)| a * b).sum();
            prop_assert!((s[k] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn match_count_of_a_stored_pattern_is_d((m, _x) in memory_and_query(5, 9), k in 0usize..5) {
        let k = k % m.n();
        let s = match_count_scores(&m, m.column(k), 0.0).unwrap();
        prop_assert_eq!(s[k], m.d() as f64);
        prop_assert!(s.iter().all(|&c| c <= m.d() as f64));
    }
}

#[test]
fn bruteforce_rejects_large_dimensions() {
    let v = vec![0.0; 21];
    assert!(k_optimal_bruteforce(BaseKind::Dot, &v, &v, 3).is_err());
    assert!(k_optimal_bruteforce(BaseKind::Dot, &v[..4], &v[..4], 0).is_err());
}
