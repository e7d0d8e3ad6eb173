//! Minimal dense feed-forward networks with exact analytic gradients.
//!
//! Parameters of a network are one flat `f64` vector. Layer `l` stores its
//! weight matrix row-major (`out_dim x in_dim`) followed by its bias, and
//! layers are laid out in order. Batches are row-major `n x dim` slices.

mod adam;
mod format;
mod fusion;
mod gradcheck;
mod loss;

pub use adam::AdamState;
pub use format::{NamedArray, ParamSet, PARAM_FORMAT_VERSION};
pub use fusion::{FusionArch, FusionCache, FusionNet};
pub use gradcheck::{grad_check, grad_check_fn, relative_error};
pub use loss::{cross_entropy_grad, loss_and_grad, Target, PROB_FLOOR};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::math::{softmax_in_place, sqrt};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Where a gradient handed to [`Mlp::backward`] is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradAt {
    /// With respect to the network output (after the last activation).
    Output,
    /// With respect to the last layer's pre-activation (logits).
    Logits,
}

/// Architecture of a dense network. Parameters live outside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct Mlp {
    layers: Vec<LayerSpec>,
}

impl TryFrom<Vec<LayerSpec>> for Mlp {
    type Error = Error;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<LayerSpec> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

/// Per-layer buffers kept by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub n: usize,
    /// `acts[0]` is the input, `acts[l + 1]` is the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(config("layer dimensions must be >= 1"));
            }
            if i + 1 < layers.len() {
                if l.activation == Activation::Softmax {
                    return Err(config("softmax is only allowed as the final activation"));
                }
                if layers[i + 1].in_dim != l.out_dim {
                    return Err(config(alloc::format!(
                        "layer {} outputs {} but layer {} expects {}",
                        i,
                        l.out_dim,
                        i + 1,
                        layers[i + 1].in_dim
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    pub fn final_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(LayerSpec::num_params).sum()
    }

    /// `(weights, bias)` views of layer `l`.
    pub fn layer_params<'a>(&self, params: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let spec = self.layers[l];
        let start = self.offset(l);
        let w_end = start + spec.out_dim * spec.in_dim;
        (&params[start..w_end], &params[w_end..w_end + spec.out_dim])
    }

    /// Uniform Glorot initialization, zero biases.
    pub fn init(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            let a = sqrt(6.0 / (l.in_dim + l.out_dim) as f64);
            for _ in 0..l.in_dim * l.out_dim {
                out.push(rng.random_range(-a..a));
            }
            out.extend(core::iter::repeat_n(0.0, l.out_dim));
        }
        out
    }

    pub fn forward(&self, params: &[f64], input: &[f64], n: usize) -> Result<ForwardCache> {
        check_dim("mlp parameters", self.num_params(), params.len())?;
        check_dim("mlp input", n * self.in_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for (l, spec) in self.layers.iter().enumerate() {
            let (w, b) = self.layer_params(params, l);
            let x = &acts[l];
            let mut pre = vec![0.0; n * spec.out_dim];
            for i in 0..n {
                let xi = &x[i * spec.in_dim..(i + 1) * spec.in_dim];
                let row = &mut pre[i * spec.out_dim..(i + 1) * spec.out_dim];
                for (o, r) in row.iter_mut().enumerate() {
                    let wo = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                    *r = b[o] + wo.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            let mut act = pre.clone();
            match spec.activation {
                Activation::Identity => {}
                Activation::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Softmax => act
                    .chunks_mut(spec.out_dim)
                    .for_each(softmax_in_place),
            }
            pres.push(pre);
            acts.push(act);
        }
        Ok(ForwardCache {
            n,
            acts,
            pre: pres,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input batch.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        grad: &[f64],
        at: GradAt,
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let n = cache.n;
        check_dim("mlp gradient buffer", self.num_params(), grads.len())?;
        check_dim("mlp output gradient", n * self.out_dim(), grad.len())?;
        let mut delta = grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let skip_activation = at == GradAt::Logits && l + 1 == self.layers.len();
            if !skip_activation {
                match spec.activation {
                    Activation::Identity => {}
                    Activation::Relu => {
                        for (d, p) in delta.iter_mut().zip(&cache.pre[l]) {
                            if *p <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    Activation::Softmax => {
                        let s_all = &cache.acts[l + 1];
                        for (d, s) in delta
                            .chunks_mut(spec.out_dim)
                            .zip(s_all.chunks(spec.out_dim))
                        {
                            let dot: f64 = d.iter().zip(s).map(|(a, b)| a * b).sum();
                            for (dk, sk) in d.iter_mut().zip(s) {
                                *dk = sk * (*dk - dot);
                            }
                        }
                    }
                }
            }
            let start = self.offset(l);
            let w_len = spec.out_dim * spec.in_dim;
            let x = &cache.acts[l];
            {
                let (gw, gb) = grads[start..start + w_len + spec.out_dim].split_at_mut(w_len);
                for i in 0..n {
                    let xi = &x[i * spec.in_dim..(i + 1) * spec.in_dim];
                    let di = &delta[i * spec.out_dim..(i + 1) * spec.out_dim];
                    for (o, &d) in di.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, xv) in gw[o * spec.in_dim..(o + 1) * spec.in_dim].iter_mut().zip(xi) {
                            *g += d * xv;
                        }
                    }
                }
            }
            let (w, _) = self.layer_params(params, l);
            let mut dx = vec![0.0; n * spec.in_dim];
            for i in 0..n {
                let di = &delta[i * spec.out_dim..(i + 1) * spec.out_dim];
                let dxi = &mut dx[i * spec.in_dim..(i + 1) * spec.in_dim];
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (g, wv) in dxi.iter_mut().zip(&w[o * spec.in_dim..(o + 1) * spec.in_dim]) {
                        *g += d * wv;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: Mlp,
    pub values: Vec<f64>,
}

pub fn mlp_init(specs: &[LayerSpec], seed: u64) -> Result<MlpParams> {
    let arch = Mlp::new(specs.to_vec())?;
    let mut rng = rng::derived_rng(seed, &[rng::tag::INIT]);
    let values = arch.init(&mut rng);
    Ok(MlpParams { arch, values })
}

impl MlpParams {
    pub fn weight(&self, l: usize) -> &[f64] {
        self.arch.layer_params(&self.values, l).0
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        self.arch.layer_params(&self.values, l).1
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.arch.forward(&self.values, x, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<ForwardCache> {
        self.arch.forward(&self.values, x, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, o: usize, a: Activation) -> LayerSpec {
        LayerSpec::new(i, o, a)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = mlp_init(&[spec(2, 10, Activation::Relu)], 3).unwrap();
        assert_eq!(p.weight(0).len(), 20);
        assert_eq!(p.bias(0), &[0.0; 10]);
        assert_eq!(p, mlp_init(&[spec(2, 10, Activation::Relu)], 3).unwrap());
        let a = sqrt(6.0 / 12.0);
        assert!((a - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(p.weight(0).iter().all(|w| w.abs() < a));
    }

    #[test]
    fn invalid_chains_are_rejected() {
        assert!(Mlp::new(alloc::vec![]).is_err());
        assert!(Mlp::new(alloc::vec![spec(2, 3, Activation::Relu), spec(4, 2, Activation::Softmax)]).is_err());
        assert!(Mlp::new(alloc::vec![spec(2, 3, Activation::Softmax), spec(3, 2, Activation::Identity)]).is_err());
        assert!(Mlp::new(alloc::vec![spec(0, 3, Activation::Relu)]).is_err());
    }

    #[test]
    fn forward_edge_cases() {
        let mut p = mlp_init(&[spec(3, 4, Activation::Identity)], 0).unwrap();
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let (out, _) = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, alloc::vec![0.0; 4]);

        let p = mlp_init(&[spec(3, 5, Activation::Relu), spec(5, 3, Activation::Softmax)], 1).unwrap();
        let (out, _) = p.forward(&[0.3, -2.0, 1.5]).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut p = mlp_init(&[spec(2, 3, Activation::Relu)], 0).unwrap();
        let n = p.values.len();
        p.values[..6].iter_mut().for_each(|v| *v = 1.0);
        p.values[6..n].iter_mut().for_each(|v| *v = -5.0);
        let (out, _) = p.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(out, alloc::vec![0.0; 3]);

        assert!(p.forward(&[1.0]).is_err());
    }
}
