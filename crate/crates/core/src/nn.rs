//! Small dense-network engine: ReLU MLPs with a flat parameter vector,
//! analytic gradients (including the input-gradient penalty), Adam and a
//! running input normaliser.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite gradient; update skipped")]
    NonFiniteGradient,
}

/// ReLU hidden layers, linear output. Parameters are laid out layer by
/// layer as `W` (row-major, `out x in`) followed by `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `acts[0]` is the input; `acts[l]` the post-activation of layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
}

impl Cache {
    /// Sign pattern of every hidden pre-activation, row-major per layer.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; the last layer is scaled by
    /// `output_scale`.
    pub fn new<R: Rng>(dims: &[usize], output_scale: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "bad layer dims {dims:?}");
        let mut params = Vec::with_capacity(param_count(dims));
        let layers = dims.len() - 1;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == layers { output_scale } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound) * scale);
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Mlp { dims: dims.to_vec(), params }
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(NnError::DimMismatch { expected, got: params.len() });
        }
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let start: usize = self.dims.windows(2).take(l).map(|w| (w[0] + 1) * w[1]).sum();
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (start, start + i * o, start + i * o + o)
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (a, b, _) = self.offsets(l);
        ArrayView2::from_shape((self.dims[l + 1], self.dims[l]), &self.params[a..b]).unwrap()
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b, c) = self.offsets(l);
        ArrayView1::from(&self.params[b..c])
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Cache), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let n = self.num_layers();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        acts.push(x.to_owned());
        for l in 0..n {
            let mut z = acts[l].dot(&self.weight(l).t());
            z += &self.bias(l);
            let a = if l + 1 < n { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let y = acts[n].clone();
        Ok((y, Cache { acts, pre }))
    }

    /// Output only, no cache.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let n = self.num_layers();
        let mut a = x.to_owned();
        for l in 0..n {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            if l + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache), NnError> {
        let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let (y, cache) = self.forward_batch(xv)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.predict_batch(xv)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `dy` (one row per sample). Returns the parameter
    /// gradient summed over the batch and the per-sample input gradient.
    pub fn backward_batch(&self, cache: &Cache, dy: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = self.num_layers();
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = dy.to_owned();
        for l in (0..n).rev() {
            if l + 1 < n {
                let z = &cache.pre[l];
                ndarray::Zip::from(&mut delta).and(z).for_each(|d, &zv| {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let (a, b, c) = self.offsets(l);
            let gw = delta.t().dot(&cache.acts[l]);
            grad[a..b].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = delta.sum_axis(Axis(0));
            grad[b..c].copy_from_slice(gb.as_slice().unwrap());
            delta = delta.dot(&self.weight(l));
        }
        (grad, delta)
    }

    pub fn backward(&self, cache: &Cache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dv = ArrayView2::from_shape((1, dy.len()), dy).unwrap();
        let (g, dx) = self.backward_batch(cache, dv);
        (g, dx.into_raw_vec_and_offset().0)
    }

    /// Zero-centred input-gradient penalty for a scalar-output network:
    /// `mean_i |d y(x_i) / d x_i|^2`, with its parameter gradient obtained by
    /// differentiating through the backward pass. ReLU second derivatives
    /// are zero almost everywhere, so biases receive no gradient.
    pub fn input_grad_penalty(&self, cache: &Cache) -> (f64, Vec<f64>) {
        assert_eq!(self.output_dim(), 1, "gradient penalty needs a scalar output");
        let n = self.num_layers();
        let batch = cache.acts[0].nrows();
        // masks[l] for hidden layer l (0..n-1)
        let masks: Vec<Array2<f64>> =
            (0..n - 1).map(|l| cache.pre[l].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 })).collect();
        // top-down pass: a[n] = 1, b_l = a_{l+1} W_l, a_l = mask_{l-1} * b_l
        // a[l] has width dims[l]
        let mut a: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n + 1];
        a[n] = Array2::ones((batch, 1));
        for l in (0..n).rev() {
            let b = a[l + 1].dot(&self.weight(l));
            a[l] = if l > 0 { b * &masks[l - 1] } else { b };
        }
        let g = &a[0];
        let gp = g.iter().map(|v| v * v).sum::<f64>() / batch as f64;
        // reverse of the top-down pass, starting from dGP/dg = 2 g / B
        let mut grad = vec![0.0; self.params.len()];
        let mut e = g.mapv(|v| 2.0 * v / batch as f64);
        for l in 0..n {
            // b_l = a_{l+1} W_l  =>  dW_l = a_{l+1}^T e
            let (s0, s1, _) = self.offsets(l);
            let gw = a[l + 1].t().dot(&e);
            for (dst, src) in grad[s0..s1].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            if l + 1 < n {
                e = e.dot(&self.weight(l).t()) * &masks[l];
            }
        }
        (gp, grad)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Bias-corrected Adam step (descends `grads`). On a non-finite gradient
    /// nothing is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::DimMismatch { expected: self.m.len(), got: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Running mean / population variance with Chan's parallel merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
    pub clip: f64,
}

impl RunningNorm {
    pub fn new(dim: usize, clip: f64) -> Self {
        RunningNorm { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], clip }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| (m / self.count).max(0.0)).collect()
    }

    /// Folds a batch into the statistics. Per-dimension batch sums are taken
    /// over sorted values, so the batch's ordering cannot change the mean.
    pub fn update_batch(&mut self, x: ArrayView2<f64>) {
        let nb = x.nrows();
        if nb == 0 {
            return;
        }
        assert_eq!(x.ncols(), self.dim());
        let nbf = nb as f64;
        let mut col = Vec::with_capacity(nb);
        for d in 0..self.dim() {
            col.clear();
            col.extend(x.column(d).iter().copied());
            col.sort_by(f64::total_cmp);
            let bmean = col.iter().sum::<f64>() / nbf;
            let mut dev: Vec<f64> = col.iter().map(|v| (v - bmean) * (v - bmean)).collect();
            dev.sort_by(f64::total_cmp);
            let bm2: f64 = dev.iter().sum();
            let total = self.count + nbf;
            let delta = bmean - self.mean[d];
            self.mean[d] += delta * nbf / total;
            self.m2[d] += bm2 + delta * delta * self.count * nbf / total;
        }
        self.count += nbf;
    }

    pub fn update(&mut self, x: &[f64]) {
        self.update_batch(ArrayView2::from_shape((1, x.len()), x).unwrap());
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let var = self.var();
        x.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((v, m), s)| ((v - m) / (s + 1e-8).sqrt()).clamp(-self.clip, self.clip))
            .collect()
    }

    pub fn normalize_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let var = self.var();
        let inv: Array1<f64> = var.iter().map(|s| 1.0 / (s + 1e-8).sqrt()).collect();
        let mean = ArrayView1::from(&self.mean);
        let mut out = &x - &mean;
        out *= &inv;
        let c = self.clip;
        out.mapv_inplace(|v| v.clamp(-c, c));
        out
    }

    /// Updates (in training mode) and normalises.
    pub fn apply(&mut self, x: &[f64], training: bool) -> Vec<f64> {
        if training {
            self.update(x);
        }
        self.normalize(x)
    }
}

/// Copies selected rows of `x`.
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.slice_mut(s![r, ..]).assign(&x.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let dims = [3, 2];
        let mut p = vec![0.0; param_count(&dims)];
        p[6] = 0.5;
        p[7] = -1.5;
        let net = Mlp::from_params(&dims, p).unwrap();
        assert_eq!(net.predict(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let dims = [2, 2];
        let net = Mlp::from_params(&dims, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(net.predict(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn dim_mismatch() {
        let net = Mlp::new(&[3, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.predict(&[1.0]), Err(NnError::DimMismatch { expected: 3, got: 1 }));
        assert!(Mlp::from_params(&[3, 1], vec![0.0; 3]).is_err());
    }

    #[test]
    fn linear_grad_is_outer_product() {
        let dims = [2, 2];
        let net = Mlp::from_params(&dims, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0]).unwrap();
        let x = [2.0, -1.0];
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &[1.0, 3.0]);
        assert_eq!(&g[..4], &[2.0, -1.0, 6.0, -3.0]);
        assert_eq!(&g[4..], &[1.0, 3.0]);
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        // hidden unit has preactivation -1: nothing flows to its weights
        let dims = [1, 1, 1];
        let net = Mlp::from_params(&dims, vec![1.0, -2.0, 1.0, 0.0]).unwrap();
        let (_, cache) = net.forward(&[1.0]).unwrap();
        let (g, dx) = net.backward(&cache, &[1.0]);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut st = AdamState::new(1, 0.01);
        let mut p = [1.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        let mut st = AdamState::new(2, 0.01);
        let mut q = [0.5, -0.5];
        st.step(&mut q, &[0.0, 0.0]).unwrap();
        assert_eq!(q, [0.5, -0.5]);
        assert_eq!(st.step(&mut q, &[f64::NAN, 0.0]), Err(NnError::NonFiniteGradient));
        assert_eq!(q, [0.5, -0.5]);
    }

    #[test]
    fn adam_two_steps_hand_unrolled() {
        let (lr, b1, b2, eps, g) = (0.1, 0.9, 0.999, 1e-8, 0.3);
        let mut st = AdamState::new(1, lr);
        let mut p = [0.0];
        st.step(&mut p, &[g]).unwrap();
        st.step(&mut p, &[g]).unwrap();
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let x1 = -lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - x2).abs() < 1e-12);
    }

    #[test]
    fn running_norm_stats() {
        let mut rn = RunningNorm::new(1, 5.0);
        let first = rn.apply(&[4.0], true);
        assert_eq!(first, vec![0.0]);
        let mut rn = RunningNorm::new(1, 5.0);
        for v in [1.0, 2.0, 3.0] {
            rn.update(&[v]);
        }
        assert!((rn.mean[0] - 2.0).abs() < 1e-15);
        assert!((rn.var()[0] - 2.0 / 3.0).abs() < 1e-15);
        let before = rn.clone();
        let _ = rn.apply(&[10.0], false);
        assert_eq!(rn, before);
    }

    #[test]
    fn running_norm_clips() {
        let mut rn = RunningNorm::new(1, 2.0);
        for v in [0.0, 1.0, 0.0, 1.0] {
            rn.update(&[v]);
        }
        assert_eq!(rn.normalize(&[100.0]), vec![2.0]);
    }
}
