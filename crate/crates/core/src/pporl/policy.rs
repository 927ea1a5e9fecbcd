//! Gaussian policy with a fixed diagonal variance and the value network.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, NnError, RunningNorm};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln N(u; mu, diag(var))`.
pub fn gaussian_log_prob(u: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    u.iter()
        .zip(mu)
        .zip(var)
        .map(|((u, m), v)| -0.5 * ((u - m) * (u - m) / v + v.ln() + LN_2PI))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub net: Mlp,
    pub obs_norm: RunningNorm,
    /// Per-dimension variance of the action distribution.
    pub var: Vec<f64>,
    /// Environment action is `offset + scale * u`.
    pub action_offset: Vec<f64>,
    pub action_scale: Vec<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng>(
        obs_dim: usize,
        hidden: &[usize],
        var: f64,
        action_offset: Vec<f64>,
        action_scale: Vec<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(var > 0.0, "policy variance must be positive");
        let act_dim = action_offset.len();
        assert_eq!(action_scale.len(), act_dim);
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(act_dim);
        PolicyNet {
            net: Mlp::new(&dims, 0.01, rng),
            obs_norm: RunningNorm::new(obs_dim, 5.0),
            var: vec![var; act_dim],
            action_offset,
            action_scale,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn normalize(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        self.obs_norm.normalize_batch(obs)
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        self.net.predict(&self.obs_norm.normalize(obs))
    }

    pub fn log_prob(&self, u: &[f64], mu: &[f64]) -> f64 {
        gaussian_log_prob(u, mu, &self.var)
    }

    /// Draws `u ~ N(mu(obs), var)`; returns `(u, ln p(u))`.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64), NnError> {
        let mu = self.mean(obs)?;
        let u: Vec<f64> = mu
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect();
        let lp = self.log_prob(&u, &mu);
        Ok((u, lp))
    }

    pub fn to_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.action_offset).zip(&self.action_scale).map(|((u, o), s)| o + s * u).collect()
    }
}

/// Clipped-surrogate loss `-mean(min(rho A, clip(rho) A))` and its gradient
/// with respect to the policy parameters. `obs_n` is already normalised.
pub fn policy_loss_and_grad(
    policy: &PolicyNet,
    obs_n: ArrayView2<f64>,
    u: ArrayView2<f64>,
    logp_old: &[f64],
    adv: &[f64],
    clip: f64,
) -> Result<(f64, Vec<f64>, f64), NnError> {
    let n = obs_n.nrows();
    let nf = n as f64;
    let (mu, cache) = policy.net.forward_batch(obs_n)?;
    let mut dmu = Array2::zeros(mu.raw_dim());
    let mut loss = 0.0;
    let mut clipped = 0usize;
    for i in 0..n {
        let lp = gaussian_log_prob(u.row(i).as_slice().unwrap(), mu.row(i).as_slice().unwrap(), &policy.var);
        let rho = (lp - logp_old[i]).exp();
        let a = adv[i];
        let unclipped = rho * a;
        let clipped_term = rho.clamp(1.0 - clip, 1.0 + clip) * a;
        if unclipped <= clipped_term {
            loss -= unclipped / nf;
            for j in 0..mu.ncols() {
                dmu[[i, j]] = -(a * rho * (u[[i, j]] - mu[[i, j]]) / policy.var[j]) / nf;
            }
        } else {
            loss -= clipped_term / nf;
            clipped += 1;
        }
    }
    let (grad, _) = policy.net.backward_batch(&cache, dmu.view());
    Ok((loss, grad, clipped as f64 / nf))
}

/// Surrogate term for one sample.
pub fn clipped_surrogate(rho: f64, adv: f64, clip: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - clip, 1.0 + clip) * adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp,
    /// Normalises `observation ++ augmentation`.
    pub norm: RunningNorm,
    pub aug_dim: usize,
}

impl ValueNet {
    pub fn new<R: Rng>(obs_dim: usize, aug_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![obs_dim + aug_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        ValueNet { net: Mlp::new(&dims, 1.0, rng), norm: RunningNorm::new(obs_dim + aug_dim, 5.0), aug_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Values for raw (unnormalised) input rows.
    pub fn values(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        let xn = self.norm.normalize_batch(x);
        Ok(self.net.predict_batch(xn.view())?.into_raw_vec_and_offset().0)
    }
}

/// `mean((V - R)^2)` and its parameter gradient. `x_n` is already normalised.
pub fn value_loss_and_grad(value: &ValueNet, x_n: ArrayView2<f64>, returns: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    let nf = x_n.nrows() as f64;
    let (v, cache) = value.net.forward_batch(x_n)?;
    let mut dv = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for i in 0..v.nrows() {
        let e = v[[i, 0]] - returns[i];
        loss += e * e / nf;
        dv[[i, 0]] = 2.0 * e / nf;
    }
    let (grad, _) = value.net.backward_batch(&cache, dv.view());
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_prob_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.gen_range(1..5);
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let var = vec![0.05; d];
            let mut want = 1.0;
            for k in 0..d {
                want *= (-(u[k] - mu[k]).powi(2) / (2.0 * 0.05)).exp() / (2.0 * std::f64::consts::PI * 0.05).sqrt();
            }
            assert!((gaussian_log_prob(&u, &mu, &var) - want.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn action_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyNet::new(3, &[8], 0.05, vec![1.0, -1.0], vec![0.5, 2.0], &mut rng);
        assert_eq!(p.to_action(&[2.0, 1.0]), vec![2.0, 1.0]);
        let (u, lp) = p.sample(&[0.1, 0.2, 0.3], &mut rng).unwrap();
        let mu = p.mean(&[0.1, 0.2, 0.3]).unwrap();
        assert!((lp - p.log_prob(&u, &mu)).abs() < 1e-15);
    }
}
