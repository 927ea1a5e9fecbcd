use mimic_core::nn::{AdamState, Mlp, RunningNorm};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fit(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&[3, 16, 16, 1], 1.0, &mut rng);
    let mut opt = AdamState::new(net.params().len(), 1e-3);
    for _ in 0..50 {
        let x = Array2::from_shape_fn((32, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = net.forward_batch(x.view()).unwrap();
        let dy = Array2::from_shape_fn((32, 1), |(i, _)| (y[[i, 0]] - x[[i, 0]] * x[[i, 1]]) / 32.0);
        let (g, _) = net.backward_batch(&cache, dy.view());
        opt.step(net.params_mut(), &g).unwrap();
    }
    net.params().to_vec()
}

#[test]
fn adam_runs_are_bitwise_equal() {
    for seed in 0..3 {
        let (a, b) = (fit(seed), fit(seed));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(fit(0), fit(1));
}

proptest! {
    #[test]
    fn running_mean_ignores_row_order(rows in prop::collection::vec(prop::array::uniform4(-1e3f64..1e3), 1..64), seed in any::<u64>()) {
        let x = Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j]);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let y = Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[order[i]][j]);
        let (mut a, mut b) = (RunningNorm::new(4, 5.0), RunningNorm::new(4, 5.0));
        a.update_batch(x.view());
        b.update_batch(y.view());
        prop_assert_eq!(a.mean, b.mean);
    }
}
