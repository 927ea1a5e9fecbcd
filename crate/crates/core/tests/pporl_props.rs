use mimic_core::genref::{generate, GenOptions, RefTask};
use mimic_core::matching::{MatchSource, Matching};
use mimic_core::motion_io::save_motion;
use mimic_core::pporl::eval::{run_episode, success_rule, EpisodeTrace};
use mimic_core::pporl::policy::clipped_surrogate;
use mimic_core::pporl::{augment_critic_obs, gaussian_log_prob, normalize_advantages, RunConfig, Trainer};
use mimic_core::simworld::RobotModel;
use proptest::prelude::*;

proptest! {
    #[test]
    fn log_prob_closed_form(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..2.0), 1..8)) {
        let (u, mu, var): (Vec<f64>, Vec<f64>, Vec<f64>) =
            (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect(), pairs.iter().map(|p| p.2).collect());
        let density: f64 = pairs
            .iter()
            .map(|(u, m, v)| (-(u - m) * (u - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .product();
        prop_assert!((gaussian_log_prob(&u, &mu, &var) - density.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalized_moments(mut adv in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let spread = adv.iter().cloned().fold(f64::MIN, f64::max) - adv.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_positive_advantages(adv in 1e-6f64..10.0, eps in 0.05f64..0.4, over in 1e-6f64..3.0) {
        let rho = 1.0 + eps + over;
        prop_assert!(clipped_surrogate(rho, adv, eps) <= rho * adv);
        prop_assert!((clipped_surrogate(rho, adv, eps) - (1.0 + eps) * adv).abs() < 1e-12);
    }

    #[test]
    fn critic_augmentation_picks_next_match(vs in prop::collection::btree_set(0usize..40, 0..6), t in 0usize..45) {
        let pairs: Vec<(usize, usize)> = vs.iter().enumerate().map(|(i, &v)| (i, v)).collect();
        let m = Matching::new(pairs.clone(), 0.0, MatchSource::Dp).unwrap();
        let feats: Vec<Vec<f64>> = (0..8).map(|u| vec![u as f64]).collect();
        let out = augment_critic_obs(t, &m, &feats, 40);
        match pairs.iter().find(|p| p.1 >= t) {
            Some(&(u, v)) => prop_assert_eq!(out, vec![u as f64, (v - t) as f64 / 40.0]),
            None => prop_assert_eq!(out, vec![7.0, 0.0]),
        }
    }
}

fn imitation_config(dir: &std::path::Path, seed: u64) -> RunConfig {
    let model = RobotModel::preset("squatter").unwrap();
    let path = dir.join("squat.json");
    save_motion(&generate(RefTask::Squat, &model, &GenOptions::new(61, 30.0)).unwrap(), &path).unwrap();
    let text = format!(
        "task = \"imitate\"\niterations = 2\nseed = {seed}\n[robot]\npreset = \"squatter\"\n[motion]\npath = \"{}\"\n\
         [sim]\nhorizon = 60\n[ppo]\nenvs = 4\nsteps = 32\nminibatch = 32\nepochs = 2\n",
        path.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn equal_seeds_give_equal_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed| {
        let mut t = Trainer::from_config(imitation_config(dir.path(), seed)).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint().to_json()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn success_is_a_function_of_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::from_config(imitation_config(dir.path(), 5)).unwrap();
    let rule = success_rule(&t.setup);
    for seed in 0..4 {
        let trace = run_episode(&t.setup, &t.policy, seed).unwrap();
        let back: EpisodeTrace = serde_json::from_str(&serde_json::to_string(&trace).unwrap()).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.success(rule, &t.setup.cfg.eval), trace.success(rule, &t.setup.cfg.eval));
        assert_eq!(back.mean_similarity(), trace.mean_similarity());
    }
}
