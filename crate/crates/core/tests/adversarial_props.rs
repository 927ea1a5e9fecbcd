use mimic_core::adversarial::{adv_reward_from_prob, DiscConfig, Discriminator};
use mimic_core::nn::AdamState;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

proptest! {
    #[test]
    fn reward_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (adv_reward_from_prob(lo), adv_reward_from_prob(hi));
        prop_assert!(rl <= rh);
        prop_assert!(rl > 0.0 && rh <= 9.2104);
    }
}

const DIM: usize = 8;

fn draw(rng: &mut ChaCha8Rng, n: usize, centre: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, DIM), |_| centre + rng.sample::<f64, _>(StandardNormal))
}

/// Trains on Gaussians centred at +2 (reference) and -2 (policy); returns the
/// per-step losses and the final discriminator.
fn separate(seed: u64, w_gp: f64, steps: usize) -> (Vec<f64>, Discriminator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DiscConfig { w_gp, normalize_inputs: false, ..DiscConfig::default() };
    let mut disc = Discriminator::new(DIM, &[64, 64], cfg, &mut rng);
    let mut opt = AdamState::new(disc.net.params().len(), 3e-4);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (r, p) = (draw(&mut rng, 64, 2.0), draw(&mut rng, 64, -2.0));
        let (st, g) = disc.loss_and_grad(r.view(), p.view()).unwrap();
        losses.push(st.loss);
        opt.step(disc.net.params_mut(), &g).unwrap();
    }
    (losses, disc)
}

#[test]
fn loss_moving_average_decreases() {
    let (losses, _) = separate(0, 5.0, 2000);
    let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let checkpoints: Vec<f64> = ma.iter().step_by(100).copied().collect();
    for w in checkpoints.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{checkpoints:?}");
    }
    assert!(ma.last().unwrap() < &(0.5 * ma[0]));
}

fn input_grad_norm(disc: &Discriminator, x: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for row in x.rows() {
        let (_, cache) = disc.net.forward(row.as_slice().unwrap()).unwrap();
        let (_, dx) = disc.net.backward(&cache, &[1.0]);
        total += dx.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    total / x.nrows() as f64
}

#[test]
fn penalty_shrinks_reference_gradients() {
    let (mut with, mut without) = (0.0, 0.0);
    for seed in 0..5 {
        let probe = draw(&mut ChaCha8Rng::seed_from_u64(100 + seed), 256, 2.0);
        with += input_grad_norm(&separate(seed, 5.0, 1000).1, &probe);
        without += input_grad_norm(&separate(seed, 0.0, 1000).1, &probe);
    }
    assert!(with < without, "{with} vs {without}");
}
