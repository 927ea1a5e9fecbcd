use mimic_core::matching::{brute_force_matching, dp_optimal_matching, dp_optimal_matching_unfiltered, matched_reward, Matching, MatchSource};
use mimic_core::similarity::SimMatrix;
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(h, t)| prop::collection::vec(prop::collection::vec(0.0f64..1.0, t), h))
}

fn monotone(m: &Matching) -> bool {
    m.pairs().windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dp_equals_brute_force(rows in matrix(6)) {
        let s = SimMatrix::from_rows(rows);
        let dp = dp_optimal_matching_unfiltered(&s);
        prop_assert_eq!(dp.total_similarity(), brute_force_matching(&s).unwrap().total_similarity());
        prop_assert!(monotone(&dp));
    }

    #[test]
    fn raising_an_entry_never_lowers_the_total(rows in matrix(10), i in 0usize..10, j in 0usize..10, bump in 0.0f64..1.0) {
        let mut s = SimMatrix::from_rows(rows);
        let before = dp_optimal_matching_unfiltered(&s).total_similarity();
        let (i, j) = (i % s.rows, j % s.cols);
        s.set(i, j, s.get(i, j) + bump);
        prop_assert!(dp_optimal_matching_unfiltered(&s).total_similarity() >= before);
    }

    #[test]
    fn matched_reward_support(rows in matrix(12), min_sim in 0.0f64..0.9) {
        let s = SimMatrix::from_rows(rows);
        let m = dp_optimal_matching(&s, min_sim);
        prop_assert!(monotone(&m));
        let nonzero = (0..s.cols).filter(|&t| matched_reward(t, &m, &s) != 0.0).count();
        prop_assert!(nonzero <= m.len() + 1);
        let total: f64 = (0..s.cols).map(|t| matched_reward(t, &m, &s)).sum();
        prop_assert!((total - m.total_similarity()).abs() < 1e-9);
    }
}

#[test]
fn rejects_non_monotone_pairs() {
    assert!(Matching::new(vec![(0, 1), (0, 2)], 0.0, MatchSource::Dp).is_err());
    assert!(Matching::new(vec![(1, 1), (2, 0)], 0.0, MatchSource::Dp).is_err());
}

#[test]
fn large_matrix_is_fast() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let s = SimMatrix::from_rows((0..300).map(|_| (0..300).map(|_| rng.gen::<f64>()).collect()).collect());
    let start = std::time::Instant::now();
    let m = dp_optimal_matching(&s, 0.05);
    assert!(start.elapsed() < std::time::Duration::from_millis(50), "{:?}", start.elapsed());
    assert!(m.len() <= 300);
}
