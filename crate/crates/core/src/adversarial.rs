//! Transition discriminator, its loss with a zero-centred gradient penalty,
//! and the adversarial reward `-ln(1 - D)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, NnError, RunningNorm};

/// Output clamp: `D` stays in `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub w_gp: f64,
    /// Normalise inputs with a running estimate.
    pub normalize_inputs: bool,
    /// Use the literal `E[-(1 - ln D)]` policy term instead of
    /// `E[-ln(1 - D)]`.
    pub literal_policy_term: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { w_gp: 5.0, normalize_inputs: true, literal_policy_term: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub norm: RunningNorm,
    pub cfg: DiscConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiscLossStats {
    pub loss: f64,
    pub data_term: f64,
    pub grad_penalty: f64,
    /// Fraction of reference samples with `D > 0.5` and policy samples with
    /// `D < 0.5`.
    pub accuracy: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped probability and its derivative with respect to the logit.
fn prob_and_slope(z: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if p < EPS {
        (EPS, 0.0)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Adversarial reward for a clamped discriminator output.
pub fn adv_reward_from_prob(d: f64) -> f64 {
    -(1.0 - d.clamp(EPS, 1.0 - EPS)).ln()
}

impl Discriminator {
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], cfg: DiscConfig, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Discriminator { net: Mlp::new(&dims, 1.0, rng), norm: RunningNorm::new(input_dim, 5.0), cfg }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn prepare(&self, x: ArrayView2<f64>) -> Array2<f64> {
        if self.cfg.normalize_inputs {
            self.norm.normalize_batch(x)
        } else {
            x.to_owned()
        }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        let xn = self.prepare(x);
        Ok(self.net.predict_batch(xn.view())?.into_raw_vec_and_offset().0)
    }

    /// Clamped `D(x)` per row.
    pub fn probs(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        Ok(self.logits(x)?.into_iter().map(|z| prob_and_slope(z).0).collect())
    }

    /// `-ln(1 - D)` per transition row.
    pub fn rewards(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        Ok(self.probs(x)?.into_iter().map(adv_reward_from_prob).collect())
    }

    pub fn adv_reward(&self, transition: &[f64]) -> Result<f64, NnError> {
        let x = ArrayView2::from_shape((1, transition.len()), transition).unwrap();
        Ok(self.rewards(x)?[0])
    }

    /// Mean squared input gradient of the logit over `reference` rows.
    pub fn grad_penalty(&self, reference: ArrayView2<f64>) -> Result<f64, NnError> {
        let xn = self.prepare(reference);
        let (_, cache) = self.net.forward_batch(xn.view())?;
        Ok(self.net.input_grad_penalty(&cache).0)
    }

    /// Loss and parameter gradient on one batch of reference and policy
    /// transitions. Input statistics are not touched.
    pub fn loss_and_grad(
        &self,
        reference: ArrayView2<f64>,
        policy: ArrayView2<f64>,
    ) -> Result<(DiscLossStats, Vec<f64>), NnError> {
        assert!(reference.nrows() > 0 && policy.nrows() > 0, "discriminator batches must be non-empty");
        let (nr, np) = (reference.nrows() as f64, policy.nrows() as f64);
        let xr = self.prepare(reference);
        let xp = self.prepare(policy);
        let (zr, cr) = self.net.forward_batch(xr.view())?;
        let (zp, cp) = self.net.forward_batch(xp.view())?;

        let mut data = 0.0;
        let mut correct = 0usize;
        let mut dzr = Array2::zeros((zr.nrows(), 1));
        for (i, &z) in zr.iter().enumerate() {
            let (p, slope) = prob_and_slope(z);
            data += -p.ln() / nr;
            dzr[[i, 0]] = -(slope / p) / nr;
            correct += (p > 0.5) as usize;
        }
        let mut dzp = Array2::zeros((zp.nrows(), 1));
        for (i, &z) in zp.iter().enumerate() {
            let (p, slope) = prob_and_slope(z);
            if self.cfg.literal_policy_term {
                data += -(1.0 - p.ln()) / np;
                dzp[[i, 0]] = (slope / p) / np;
            } else {
                data += -(1.0 - p).ln() / np;
                dzp[[i, 0]] = (slope / (1.0 - p)) / np;
            }
            correct += (p < 0.5) as usize;
        }
        let (mut grad, _) = self.net.backward_batch(&cr, dzr.view());
        let (gp_grad_policy, _) = self.net.backward_batch(&cp, dzp.view());
        for (g, h) in grad.iter_mut().zip(&gp_grad_policy) {
            *g += h;
        }
        let mut gp = 0.0;
        if self.cfg.w_gp != 0.0 {
            let (v, ggp) = self.net.input_grad_penalty(&cr);
            gp = v;
            for (g, h) in grad.iter_mut().zip(&ggp) {
                *g += self.cfg.w_gp * h;
            }
        }
        let stats = DiscLossStats {
            loss: data + self.cfg.w_gp * gp,
            data_term: data,
            grad_penalty: gp,
            accuracy: correct as f64 / (nr + np),
        };
        Ok((stats, grad))
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(&self, reference: ArrayView2<f64>, policy: ArrayView2<f64>) -> Result<f64, NnError> {
        Ok(self.loss_and_grad(reference, policy)?.0.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_disc(dim: usize, w_gp: f64) -> Discriminator {
        let dims = [dim, 4, 1];
        Discriminator {
            net: Mlp::from_params(&dims, vec![0.0; param_count(&dims)]).unwrap(),
            norm: RunningNorm::new(dim, 5.0),
            cfg: DiscConfig { w_gp, normalize_inputs: false, literal_policy_term: false },
        }
    }

    #[test]
    fn half_output_data_term() {
        let d = zero_disc(3, 5.0);
        let r = Array2::from_elem((4, 3), 0.3);
        let p = Array2::from_elem((5, 3), -0.1);
        let (st, _) = d.loss_and_grad(r.view(), p.view()).unwrap();
        assert!((st.data_term - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(st.grad_penalty, 0.0);
        assert!((d.adv_reward(&[0.0; 3]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_logit_penalty_is_weight_norm() {
        let dims = [3, 1];
        let w = [0.5, -1.5, 2.0];
        let mut p = w.to_vec();
        p.push(0.7);
        let d = Discriminator {
            net: Mlp::from_params(&dims, p).unwrap(),
            norm: RunningNorm::new(3, 5.0),
            cfg: DiscConfig { w_gp: 1.0, normalize_inputs: false, literal_policy_term: false },
        };
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.5);
        let gp = d.grad_penalty(x.view()).unwrap();
        let expected: f64 = w.iter().map(|v| v * v).sum();
        assert!((gp - expected).abs() < 1e-12);
    }

    #[test]
    fn reward_limits() {
        assert!((adv_reward_from_prob(0.5) - 0.693147).abs() < 1e-6);
        assert!((adv_reward_from_prob(EPS) - 1.00005e-4).abs() < 1e-8);
        assert!((adv_reward_from_prob(1.0) - 9.21034).abs() < 1e-4);
        assert!((adv_reward_from_prob(1.0) + EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_batches_have_tiny_data_term() {
        let dims = [1, 1];
        let d = Discriminator {
            net: Mlp::from_params(&dims, vec![100.0, 0.0]).unwrap(),
            norm: RunningNorm::new(1, 5.0),
            cfg: DiscConfig { w_gp: 0.0, normalize_inputs: false, literal_policy_term: false },
        };
        let r = Array2::from_elem((3, 1), 1.0);
        let p = Array2::from_elem((3, 1), -1.0);
        let (st, g) = d.loss_and_grad(r.view(), p.view()).unwrap();
        assert!((st.data_term - 2.0 * -(1.0 - EPS).ln()).abs() < 1e-12);
        assert!(st.data_term < 2.1e-4);
        assert_eq!(st.accuracy, 1.0);
        // clamped outputs pass no gradient
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reward_monotone_in_prob() {
        let mut last = -1.0;
        for k in 0..=100 {
            let r = adv_reward_from_prob(k as f64 / 100.0);
            assert!(r >= last);
            assert!((0.0..=9.2104).contains(&r));
            last = r;
        }
    }

    #[test]
    fn construction_shape() {
        let d = Discriminator::new(8, &[16, 8], DiscConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(d.net.dims(), &[8, 16, 8, 1]);
    }
}
