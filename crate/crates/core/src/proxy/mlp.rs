use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Widths of the encoder (input → h1 → h2 → latent) and projector (latent → hidden → out).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden1: 256,
            hidden2: 128,
            latent: 128,
            projector_hidden: 128,
            projector_out: 64,
        }
    }
}

impl Architecture {
    pub fn encoder_sizes(&self, input_dim: usize) -> Vec<usize> {
        vec![input_dim, self.hidden1, self.hidden2, self.latent]
    }

    pub fn projector_sizes(&self) -> Vec<usize> {
        vec![self.latent, self.projector_hidden, self.projector_out]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Affine layers with a rectifier between consecutive layers and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(sizes: &[usize], rng: &mut rng::Rng) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    k + 1,
                    w[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::InvalidArgument("bias length does not match layer width".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::output_dim));
        s
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut acts = self.forward_trace(x);
        acts.pop().expect("at least one layer")
    }

    /// Activations `[x, a_1, ..., a_L]`; hidden activations are post-rectifier.
    pub(crate) fn forward_trace(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut h = acts[k].dot(&layer.weight.t());
            h += &layer.bias;
            if k < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(h);
        }
        acts
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        acts: &[Array2<f64>],
        grad_out: Array2<f64>,
        grads: &mut Mlp,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut g = grad_out;
        for k in (0..self.layers.len()).rev() {
            if k < last {
                g.zip_mut_with(&acts[k + 1], |gv, &a| {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let gl = &mut grads.layers[k];
            gl.weight += &g.t().dot(&acts[k]);
            gl.bias += &g.sum_axis(Axis(0));
            if k > 0 || need_input_grad {
                g = g.dot(&self.layers[k].weight);
            }
        }
        need_input_grad.then_some(g)
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }
}

/// Encoder `E` plus the training-only projector head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub encoder: Mlp,
    pub projector: Mlp,
}

impl EncoderParams {
    pub fn init(input_dim: usize, arch: &Architecture, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let encoder = Mlp::init(&arch.encoder_sizes(input_dim), &mut rng);
        let projector = Mlp::init(&arch.projector_sizes(), &mut rng);
        Self { encoder, projector }
    }

    pub fn new(encoder: Mlp, projector: Mlp) -> Result<Self> {
        if encoder.layers.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "encoder must have 3 layers, got {}",
                encoder.layers.len()
            )));
        }
        if encoder.output_dim() != projector.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: encoder.output_dim(),
                found: projector.input_dim(),
            });
        }
        let params = Self { encoder, projector };
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn projector_dim(&self) -> usize {
        self.projector.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            projector: self.projector.zeros_like(),
        }
    }

    /// Every parameter in a fixed order (encoder then projector; weights then bias per layer).
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().flat_map(|s| s.iter().copied())
    }

    pub fn num_params(&self) -> usize {
        self.slices().map(<[f64]>::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: values.len(),
            });
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.encoder.slices().chain(self.projector.slices())
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> + '_ {
        self.encoder.slices_mut().chain(self.projector.slices_mut())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &EncoderParams, lr: f64) -> Self {
        let n = params.num_params();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut offset = 0;
        for (p, g) in params.slices_mut().zip(grads.slices()) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            offset += p.len();
        }
    }
}
