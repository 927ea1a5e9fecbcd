//! Advantage estimation and the clipped PPO update.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use super::policy::{policy_loss_and_grad, value_loss_and_grad, PolicyNet, ValueNet};
use crate::nn::{gather_rows, AdamState, NnError};

/// Generalised advantage estimation over one environment's steps.
///
/// `dones[t]` cuts the recursion after step `t`; `bootstrap` is the value of
/// the state following the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae: length mismatch");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// In place to mean 0, std 1 (population std). Constant batches become 0.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Flat training batch; rows align across fields.
#[derive(Debug, Clone)]
pub struct PpoBatch {
    /// Raw policy observations.
    pub obs: Array2<f64>,
    /// Raw value inputs (observation ++ augmentation).
    pub critic: Array2<f64>,
    pub u: Array2<f64>,
    pub logp: Vec<f64>,
    pub adv: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoParams {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    /// Set when a non-finite loss aborted the update.
    pub skipped: bool,
}

fn clip_grad(g: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Epochs of shuffled minibatch steps on both networks. On a non-finite
/// loss or gradient the networks and optimiser states are restored and the
/// stats come back with `skipped` set.
pub fn ppo_update<R: Rng>(
    batch: &PpoBatch,
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    popt: &mut AdamState,
    vopt: &mut AdamState,
    p: &PpoParams,
    rng: &mut R,
) -> Result<PpoStats, NnError> {
    let n = batch.obs.nrows();
    if n == 0 {
        return Ok(PpoStats::default());
    }
    let snapshot = (policy.clone(), value.clone(), popt.clone(), vopt.clone());
    let obs_n = policy.normalize(batch.obs.view());
    let crit_n = value.norm.normalize_batch(batch.critic.view());
    let mb = p.minibatch.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    let mut failed = false;
    'outer: for _ in 0..p.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let o = gather_rows(&obs_n, chunk);
            let c = gather_rows(&crit_n, chunk);
            let u = gather_rows(&batch.u, chunk);
            let lp: Vec<f64> = chunk.iter().map(|&i| batch.logp[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| batch.adv[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();
            let (pl, mut pg, cf) = policy_loss_and_grad(policy, o.view(), u.view(), &lp, &a, p.clip)?;
            let (vl, mut vg) = value_loss_and_grad(value, c.view(), &r)?;
            if !pl.is_finite() || !vl.is_finite() {
                failed = true;
                break 'outer;
            }
            clip_grad(&mut pg, p.max_grad_norm);
            clip_grad(&mut vg, p.max_grad_norm);
            if popt.step(policy.net.params_mut(), &pg).is_err() || vopt.step(value.net.params_mut(), &vg).is_err() {
                failed = true;
                break 'outer;
            }
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.clip_fraction += cf;
            count += 1.0;
        }
    }
    if failed || !policy.net.is_finite() || !value.net.is_finite() {
        (*policy, *value, *popt, *vopt) = snapshot;
        return Ok(PpoStats { skipped: true, ..PpoStats::default() });
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

/// Value inputs for rows of `obs` extended with `aug`.
pub fn critic_rows<'a>(obs: ArrayView2<'a, f64>, aug: ArrayView2<'a, f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[obs, aug]).expect("row counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_two_steps() {
        let (a, r) = gae(&[1.0, 1.0], &[0.5, 0.5], &[false, true], 0.0, 0.99, 0.95);
        assert!((a[1] - 0.5).abs() < 1e-12);
        assert!((a[0] - 1.46525).abs() < 1e-12);
        assert!((r[0] - 1.96525).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_td() {
        let rw = [0.3, -0.2, 1.0, 0.4];
        let v = [0.1, 0.7, -0.3, 0.2];
        let d = [false, true, false, false];
        let (a, _) = gae(&rw, &v, &d, 0.9, 0.9, 0.0);
        let next = [0.7, 0.0, 0.2, 0.9];
        for t in 0..4 {
            let live = if d[t] { 0.0 } else { 1.0 };
            assert!((a[t] - (rw[t] + 0.9 * next[t] * live - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_zero() {
        let (a, _) = gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.99, 0.95);
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalized_moments() {
        let mut a: Vec<f64> = (0..57).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let m = a.iter().sum::<f64>() / n;
        let s = (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-10);
        assert!((s - 1.0).abs() < 1e-6);
    }
}
