use ahop::energy::{
    descend, energy, energy_iterate, energy_lower_bound, energy_rewritten, summability_holds, unified_scores,
    DescentConfig,
};
use ahop::models::{log_sum_exp, sq_dist};
use ahop::types::MemoryMatrix;
use proptest::prelude::*;

fn problem() -> impl Strategy<Value = (MemoryMatrix, Vec<f64>, Vec<f64>)> {
    (1usize..=12, 1usize..=6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-1.0..=1.0f64, n * d)
                .prop_map(move |data| MemoryMatrix::new(d, n, data).unwrap()),
            prop::collection::vec(-2.0..=2.0f64, d),
            prop::collection::vec(-1.5..=1.5f64, d),
        )
    })
}

proptest! {
    #[test]
    fn energy_respects_the_lower_bound((m, x, b) in problem()) {
        let e = energy(&m, &x, &b).unwrap();
        prop_assert!(e >= energy_lower_bound(m.n(), &b) - 1e-12);
    }

    #[test]
    fn rewritten_energy_matches((m, x, b) in problem()) {
        let direct = energy(&m, &x, &b).unwrap();
        let rewritten = energy_rewritten(&m, &x, &b).unwrap();
        prop_assert!((direct - rewritten).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn energy_is_negative_lse_of_unified_scores((m, x, b) in problem()) {
        let s = unified_scores(&m, &x, &b).unwrap();
        for (k, col) in m.columns().enumerate() {
            let diff: Vec<f64> = x.iter().zip(col).map(|(a, c)| a - c).collect();
            let expect = -sq_dist(&x, col) + diff.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>();
            prop_assert!((s[k] - expect).abs() <= 1e-12);
        }
        prop_assert_eq!(energy(&m, &x, &b).unwrap(), -log_sum_exp(&s));
    }

    #[test]
    fn one_step_never_raises_the_energy((m, x, b) in problem()) {
        let next = energy_iterate(&m, &x, &b).unwrap();
        let before = energy(&m, &x, &b).unwrap();
        let after = energy(&m, &next, &b).unwrap();
        prop_assert!(after <= before + 1e-10);
        prop_assert!(sq_dist(&x, &next) <= before - after + 1e-10);
    }

    #[test]
    fn descent_trajectories_are_monotone_and_summable((m, x, b) in problem()) {
        let t = descend(&m, &x, &b, &DescentConfig { max_iters: 500, ..DescentConfig::default() }).unwrap();
        for w in t.energies.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10);
        }
        prop_assert!(summability_holds(&t, 1e-9));
        prop_assert_eq!(t.iterates.len(), t.energies.len());
        prop_assert_eq!(t.steps + 1, t.iterates.len());
    }
}

#[test]
fn iterate_is_the_softmax_average_plus_half_bias() {
    let m = MemoryMatrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]).unwrap();
    let x = [0.3, -0.2];
    let b = [0.4, -0.6];
    let s = unified_scores(&m, &x, &b).unwrap();
    let lse = log_sum_exp(&s);
    let mut expect = [0.5 * b[0], 0.5 * b[1]];
    for (k, col) in m.columns().enumerate() {
        let p = (s[k] - lse).exp();
        expect[0] += p * col[0];
        expect[1] += p * col[1];
    }
    let y = energy_iterate(&m, &x, &b).unwrap();
    assert!((y[0] - expect[0]).abs() < 1e-14 && (y[1] - expect[1]).abs() < 1e-14);
}

#[test]
fn zero_bias_descent_converges_near_a_stored_pattern() {
    let m = MemoryMatrix::from_columns(&[vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let t = descend(&m, &[2.5, 0.2], &[0.0, 0.0], &DescentConfig::default()).unwrap();
    assert!(t.converged);
    let last = t.iterates.last().unwrap();
    assert!(sq_dist(last, &[3.0, 0.0]) < 1e-6, "{last:?}");
}

#[test]
fn descent_rejects_bad_inputs() {
    let m = MemoryMatrix::from_columns(&[vec![0.0, 1.0]]).unwrap();
    let cfg = DescentConfig::default();
    assert!(descend(&m, &[0.0], &[0.0, 0.0], &cfg).is_err());
    assert!(descend(&m, &[0.0, 0.0], &[0.0], &cfg).is_err());
    assert!(descend(&m, &[0.0, f64::INFINITY], &[0.0, 0.0], &cfg).is_err());
    let zero_iters = DescentConfig { max_iters: 0, ..cfg };
    assert!(descend(&m, &[0.0, 0.0], &[0.0, 0.0], &zero_iters).is_err());
}
