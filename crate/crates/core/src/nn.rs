//! Small dense networks with tanh hidden layers, batched reverse-mode
//! gradients and an Adam optimizer over flat parameter vectors.
//!
//! Batches are stored column-per-sample: an input batch is `in × N`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Activations kept from a forward pass: `acts[0]` is the input, `acts[k]`
/// the output of layer k (post-tanh for hidden layers).
pub struct ForwardCache {
    pub acts: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("non-empty cache")
    }
}

impl Mlp {
    /// All-zero network with the given layer sizes.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let weights = sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Mlp { weights, biases }
    }

    /// Gaussian init with std gain/sqrt(fan_in); the last layer uses `out_gain`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(sizes);
        let n_layers = net.weights.len();
        for (k, w) in net.weights.iter_mut().enumerate() {
            let gain = if k + 1 == n_layers { out_gain } else { 1.0 };
            let std = gain / (w.ncols() as f64).sqrt();
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("finite std");
                w.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
        }
        net
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].ncols()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.nrows()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Forward pass for a single input.
    pub fn forward_one(&self, x: &[f64]) -> DVector<f64> {
        let mut h = DVector::from_column_slice(x);
        let n = self.weights.len();
        for k in 0..n {
            let mut z = &self.weights[k] * &h + &self.biases[k];
            if k + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> ForwardCache {
        let n = self.weights.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for k in 0..n {
            let mut z = &self.weights[k] * &acts[k];
            for mut col in z.column_iter_mut() {
                col += &self.biases[k];
            }
            if k + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        ForwardCache { acts }
    }

    /// Gradient of Σ (dout ⊙ output) with respect to the parameters.
    pub fn backward(&self, cache: &ForwardCache, dout: &DMatrix<f64>) -> Mlp {
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = dout.clone();
        for k in (0..n).rev() {
            if k + 1 < n {
                // tanh' = 1 − h²
                delta.zip_apply(&cache.acts[k + 1], |d, h| *d *= 1.0 - h * h);
            }
            gw.push(&delta * cache.acts[k].transpose());
            gb.push(delta.column_sum());
            if k > 0 {
                delta = self.weights[k].transpose() * &delta;
            }
        }
        gw.reverse();
        gb.reverse();
        Mlp { weights: gw, biases: gb }
    }

    /// Parameters in a fixed order: for each layer, weights (column-major)
    /// then biases.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut v);
        v
    }

    /// Inverse of `flatten_into`; returns the number of values consumed.
    pub fn unflatten_from(&mut self, v: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if v.len() < need {
            return Err(Error::Dimension {
                what: "network parameters",
                expected: need,
                got: v.len(),
            });
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&v[i..i + n]);
            i += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&v[i..i + n]);
            i += n;
        }
        Ok(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Gradient-descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[5, 4, 3]);
        assert_eq!(net.forward_one(&[1.0; 5]), DVector::zeros(3));
        assert_eq!(net.num_params(), 5 * 4 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn batched_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::random(&[6, 7, 5, 3], 1.0, &mut rng);
        let x = DMatrix::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let out = net.forward(&x);
        for j in 0..4 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let single = net.forward_one(&col);
            assert!((out.output().column(j) - single).amax() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::random(&[4, 6, 6, 2], 1.0, &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let dout = DMatrix::from_fn(2, 3, |i, j| 0.5 + i as f64 - 0.2 * j as f64);
        let loss = |n: &Mlp| n.forward(&x).output().component_mul(&dout).sum();
        let g = net.backward(&net.forward(&x), &dout).flatten();
        let p = net.flatten();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = net.clone();
            let mut pp = p.clone();
            pp[i] += h;
            a.unflatten_from(&pp).unwrap();
            let mut b = net.clone();
            pp[i] -= 2.0 * h;
            b.unflatten_from(&pp).unwrap();
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(&[3, 4, 2], 0.5, &mut rng);
        let mut other = Mlp::zeros(&[3, 4, 2]);
        assert_eq!(other.unflatten_from(&net.flatten()).unwrap(), net.num_params());
        assert_eq!(other, net);
        assert!(other.unflatten_from(&[0.0; 3]).is_err());
    }

    #[test]
    fn adam_zero_lr_is_noop_and_descends_otherwise() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 0.0);
        opt.step(&mut p, &[0.3, 0.4]);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.1, 0.0];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.1, 0.0]);
    }
}
