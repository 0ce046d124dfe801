//! Multilayer perceptrons with hand-written backpropagation, and amortized
//! neural ratio estimation.
//!
//! A ratio model is a binary classifier over concatenated `(theta, x)` inputs
//! trained to separate joint pairs from pairs whose observations were shuffled
//! within the batch. Its logit estimates `log r(x | theta) = log p(x | theta) /
//! p(x)`. Ensembles average member logits.
//!
//! Matrix products go through `matrixmultiply::dgemm`. Every row of a batch is
//! computed with the same arithmetic whatever the batch size, so single-point
//! and batched evaluations agree bit for bit.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::manifold::{ManifoldPoint, ManifoldSpec};
use crate::rng::{derive_seed, indexed_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGradient {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardBackward {
    pub output: f64,
    pub input_gradient: Vec<f64>,
    pub weight_gradients: Vec<LayerGradient>,
}

/// Scalar-output perceptron: ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

// c (m x n) = a (m x k) * b^T, with b stored (n x k) row-major.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// c (m x n) = a (m x k) * b (k x n).
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: see gemm_abt.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// c (m x n) += a^T * b, with a stored (k x m) and b stored (k x n).
fn gemm_atb_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: see gemm_abt.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Post-activation outputs of every layer for one batch.
struct Activations {
    rows: usize,
    layers: Vec<Vec<f64>>,
}

impl Mlp {
    /// Kaiming-uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for ReLU layers and `U(-sqrt(3/fan_in), sqrt(3/fan_in))` for the
    /// output layer; zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let activation = if i == last {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                let gain = if activation == Activation::Relu {
                    6.0
                } else {
                    3.0
                };
                let bound = (gain / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation: if i == last {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Contract(format!(
                    "layer {i} has inconsistent shapes"
                )));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::dims(
                    "layer chaining",
                    layers[i - 1].outputs,
                    l.inputs,
                ));
            }
            let is_last = i + 1 == layers.len();
            let expected = if is_last {
                Activation::Linear
            } else {
                Activation::Relu
            };
            if l.activation != expected {
                return Err(Error::Contract(format!(
                    "layer {i} must use {} activation",
                    expected.tag()
                )));
            }
        }
        if layers.last().map(|l| l.outputs) != Some(1) {
            return Err(Error::Contract("output layer must have one unit".into()));
        }
        Ok(Self { layers })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::Config("network output must be scalar".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn forward_activations(&self, inputs: &[f64], rows: usize) -> Activations {
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev: &[f64] = layers.last().map_or(inputs, |v| v.as_slice());
            let mut out = vec![0.0; rows * layer.outputs];
            for row in out.chunks_exact_mut(layer.outputs) {
                row.copy_from_slice(&layer.bias);
            }
            gemm_abt(
                rows,
                layer.inputs,
                layer.outputs,
                prev,
                &layer.weights,
                1.0,
                &mut out,
            );
            if layer.activation == Activation::Relu {
                out.iter_mut().for_each(|z| {
                    if *z <= 0.0 {
                        *z = 0.0
                    }
                });
            }
            layers.push(out);
        }
        Activations { rows, layers }
    }

    /// Backpropagates `output_grad` (one value per row). Accumulates weight
    /// gradients into `weight_grads` when given; writes input gradients when
    /// `input_grad` is given.
    fn backward(
        &self,
        inputs: &[f64],
        acts: &Activations,
        output_grad: &[f64],
        mut weight_grads: Option<&mut [LayerGradient]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let rows = acts.rows;
        let mut delta = output_grad.to_vec();
        let need_input = input_grad.is_some();
        let mut input_grad = input_grad;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let prev: &[f64] = if l == 0 { inputs } else { &acts.layers[l - 1] };
            if let Some(grads) = weight_grads.as_deref_mut() {
                let g = &mut grads[l];
                gemm_atb_acc(
                    layer.outputs,
                    rows,
                    layer.inputs,
                    &delta,
                    prev,
                    &mut g.weights,
                );
                for row in delta.chunks_exact(layer.outputs) {
                    for (b, d) in g.bias.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            if l == 0 {
                if let Some(out) = input_grad.as_deref_mut() {
                    gemm_ab(
                        rows,
                        layer.outputs,
                        layer.inputs,
                        &delta,
                        &layer.weights,
                        out,
                    );
                }
                break;
            }
            if l == 1 && !need_input && weight_grads.is_none() {
                break;
            }
            let mut next = vec![0.0; rows * layer.inputs];
            gemm_ab(
                rows,
                layer.outputs,
                layer.inputs,
                &delta,
                &layer.weights,
                &mut next,
            );
            // Hidden layers are ReLU; derivative is 0 where the activation is 0.
            for (d, a) in next.iter_mut().zip(prev) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = next;
        }
    }

    /// Outputs for `inputs.len() / input_dim` rows.
    pub fn forward_batch(&self, inputs: &[f64], outputs: &mut [f64]) {
        let rows = inputs.len() / self.input_dim();
        let acts = self.forward_activations(inputs, rows);
        outputs[..rows].copy_from_slice(acts.layers.last().unwrap());
    }

    /// Outputs and d(output)/d(input) for every row.
    pub fn input_gradient_batch(
        &self,
        inputs: &[f64],
        outputs: &mut [f64],
        input_grads: &mut [f64],
    ) {
        let rows = inputs.len() / self.input_dim();
        let acts = self.forward_activations(inputs, rows);
        outputs[..rows].copy_from_slice(acts.layers.last().unwrap());
        let ones = vec![1.0; rows];
        self.backward(inputs, &acts, &ones, None, Some(input_grads));
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_dim() {
            return Err(Error::dims("network input", self.input_dim(), input.len()));
        }
        let mut out = [0.0];
        self.forward_batch(input, &mut out);
        Ok(out[0])
    }

    /// Output, input gradient and parameter gradients for a single input.
    pub fn forward_backward(&self, input: &[f64]) -> Result<ForwardBackward> {
        if input.len() != self.input_dim() {
            return Err(Error::dims("network input", self.input_dim(), input.len()));
        }
        let acts = self.forward_activations(input, 1);
        let output = acts.layers.last().unwrap()[0];
        let mut weight_gradients: Vec<LayerGradient> =
            self.layers.iter().map(LayerGradient::zeros_like).collect();
        let mut input_gradient = vec![0.0; input.len()];
        self.backward(
            input,
            &acts,
            &[1.0],
            Some(&mut weight_gradients),
            Some(&mut input_gradient),
        );
        Ok(ForwardBackward {
            output,
            input_gradient,
            weight_gradients,
        })
    }

    /// Mean binary cross-entropy of the logits against 0/1 `labels`; adds the
    /// parameter gradient of that mean into `grads`.
    fn bce_step(&self, inputs: &[f64], labels: &[f64], grads: &mut [LayerGradient]) -> f64 {
        let rows = labels.len();
        let acts = self.forward_activations(inputs, rows);
        let logits = acts.layers.last().unwrap();
        let scale = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; rows];
        for ((d, &z), &y) in dz.iter_mut().zip(logits).zip(labels) {
            // -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
            loss += softplus(z) - y * z;
            *d = (sigmoid(z) - y) * scale;
        }
        self.backward(inputs, &acts, &dz, Some(grads), None);
        loss * scale
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Adam with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<LayerGradient>,
    v: Vec<LayerGradient>,
}

impl Adam {
    fn new(net: &Mlp, lr: f64) -> Self {
        let zeros: Vec<LayerGradient> = net.layers.iter().map(LayerGradient::zeros_like).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &[LayerGradient]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update(
                &mut layer.weights,
                &g.weights,
                &mut m.weights,
                &mut v.weights,
            );
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sample_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Not read from config files; runs derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
    /// Widths of the hidden layers.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sample_count: 1_000_000,
            batch_size: 8000,
            epochs: 50,
            learning_rate: 1e-3,
            seed: 0,
            hidden: vec![64, 64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "sample_count and batch_size must be positive".into(),
            ));
        }
        if self.batch_size > self.sample_count {
            return Err(Error::Config(format!(
                "batch_size {} exceeds sample_count {}",
                self.batch_size, self.sample_count
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Forward model used to generate training pairs.
pub trait Simulator: Sync {
    fn theta_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn sample_prior(&self, rng: &mut crate::rng::Rng, theta: &mut [f64]);
    fn simulate(&self, theta: &[f64], rng: &mut crate::rng::Rng, obs: &mut [f64]);
}

/// Joint draws `(theta_i, x_i)`, stored row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub theta_dim: usize,
    pub obs_dim: usize,
    pub theta: Vec<f64>,
    pub obs: Vec<f64>,
}

impl TrainingSet {
    pub fn new(theta_dim: usize, obs_dim: usize, theta: Vec<f64>, obs: Vec<f64>) -> Result<Self> {
        if theta_dim == 0 || obs_dim == 0 {
            return Err(Error::Config(
                "empty parameter or observation layout".into(),
            ));
        }
        if !theta.len().is_multiple_of(theta_dim) || !obs.len().is_multiple_of(obs_dim) {
            return Err(Error::Contract("training arrays are not whole rows".into()));
        }
        if theta.len() / theta_dim != obs.len() / obs_dim {
            return Err(Error::dims(
                "training rows",
                theta.len() / theta_dim,
                obs.len() / obs_dim,
            ));
        }
        Ok(Self {
            theta_dim,
            obs_dim,
            theta,
            obs,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.len() / self.theta_dim
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta_row(&self, i: usize) -> &[f64] {
        &self.theta[i * self.theta_dim..(i + 1) * self.theta_dim]
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }
}

/// Draws `n` joint pairs. Pair `i` uses its own random stream, so the set
/// does not depend on how the work is split across threads.
pub fn simulate_training_set<S: Simulator + ?Sized>(sim: &S, n: usize, seed: u64) -> TrainingSet {
    const CHUNK: usize = 4096;
    let (dt, dx) = (sim.theta_dim(), sim.obs_dim());
    let mut theta = vec![0.0; n * dt];
    let mut obs = vec![0.0; n * dx];
    theta
        .par_chunks_mut(CHUNK * dt)
        .zip(obs.par_chunks_mut(CHUNK * dx))
        .enumerate()
        .for_each(|(c, (tc, oc))| {
            let mut rng = rng_from_seed(indexed_seed(seed, c as u64));
            for (t, o) in tc.chunks_exact_mut(dt).zip(oc.chunks_exact_mut(dx)) {
                sim.sample_prior(&mut rng, t);
                sim.simulate(t, &mut rng, o);
            }
        });
    TrainingSet {
        theta_dim: dt,
        obs_dim: dx,
        theta,
        obs,
    }
}

/// Classifier whose logit estimates the log likelihood-to-evidence ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioModel {
    net: Mlp,
    theta_dim: usize,
    obs_dim: usize,
    /// Mean training loss of the last epoch; `None` when untrained.
    final_loss: Option<f64>,
    /// The network sees `(input - shift) / scale`, one entry per input column.
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl RatioModel {
    pub fn new(
        net: Mlp,
        theta_dim: usize,
        obs_dim: usize,
        final_loss: Option<f64>,
    ) -> Result<Self> {
        if net.input_dim() != theta_dim + obs_dim {
            return Err(Error::dims(
                "ratio input layout",
                theta_dim + obs_dim,
                net.input_dim(),
            ));
        }
        let width = theta_dim + obs_dim;
        Ok(Self {
            net,
            theta_dim,
            obs_dim,
            final_loss,
            shift: vec![0.0; width],
            scale: vec![1.0; width],
        })
    }

    /// Sets the input standardization applied before the network.
    pub fn with_standardization(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let width = self.theta_dim + self.obs_dim;
        if shift.len() != width || scale.len() != width {
            return Err(Error::dims(
                "standardization",
                width,
                shift.len().max(scale.len()),
            ));
        }
        if shift.iter().any(|v| !v.is_finite())
            || scale.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::Contract(
                "standardization needs finite shifts and positive scales".into(),
            ));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(self)
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn standardize(&self, inputs: &mut [f64]) {
        for row in inputs.chunks_exact_mut(self.shift.len()) {
            for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_loss
    }

    pub fn is_trained(&self) -> bool {
        self.final_loss.is_some()
    }

    pub fn logit(&self, theta: &[f64], obs: &[f64]) -> Result<f64> {
        self.check_layout(theta, obs)?;
        let mut input: Vec<f64> = theta.iter().chain(obs).copied().collect();
        self.standardize(&mut input);
        self.net.forward(&input)
    }

    /// Logits for `(theta_i, obs_i)` rows.
    pub fn logits(&self, theta: &[f64], obs: &[f64]) -> Vec<f64> {
        let rows = theta.len() / self.theta_dim;
        let mut inputs = concat_rows(theta, self.theta_dim, obs, self.obs_dim, rows);
        self.standardize(&mut inputs);
        let mut out = vec![0.0; rows];
        self.net.forward_batch(&inputs, &mut out);
        out
    }

    fn check_layout(&self, theta: &[f64], obs: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim {
            return Err(Error::dims("ratio parameter", self.theta_dim, theta.len()));
        }
        if obs.len() != self.obs_dim {
            return Err(Error::dims("ratio observation", self.obs_dim, obs.len()));
        }
        Ok(())
    }
}

fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (da + db));
    for i in 0..rows {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    out
}

/// Sattolo's algorithm: a uniformly random cyclic permutation, hence one
/// without fixed points.
fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Trains one ratio model on a fixed training set.
pub fn fit_ratio(data: &TrainingSet, config: &TrainConfig) -> Result<RatioModel> {
    config.validate()?;
    if data.len() < config.batch_size.min(2) {
        return Err(Error::Config("training set smaller than one batch".into()));
    }
    let (dt, dx) = (data.theta_dim, data.obs_dim);
    let width = dt + dx;
    let mut rng = rng_from_seed(config.seed);
    let sizes: Vec<usize> = std::iter::once(width)
        .chain(config.hidden.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let mut net = Mlp::new(&sizes, &mut rng)?;
    // zero output layer: before any step the ratio is the constant 1
    if let Some(out) = net.layers_mut().last_mut() {
        out.weights.iter_mut().for_each(|w| *w = 0.0);
        out.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let n = data.len().min(config.sample_count);
    let (shift, scale) = column_moments(data, n);
    if config.epochs == 0 {
        return RatioModel::new(net, dt, dx, None)?.with_standardization(shift, scale);
    }
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads: Vec<LayerGradient> = net.layers.iter().map(LayerGradient::zeros_like).collect();
    let mut inputs = Vec::with_capacity(2 * config.batch_size * width);
    let mut labels = Vec::with_capacity(2 * config.batch_size);
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let shuffle = derangement(batch.len(), &mut rng);
            inputs.clear();
            labels.clear();
            for &i in batch {
                inputs.extend_from_slice(data.theta_row(i));
                inputs.extend_from_slice(data.obs_row(i));
                labels.push(1.0);
            }
            for (k, &i) in batch.iter().enumerate() {
                inputs.extend_from_slice(data.theta_row(i));
                inputs.extend_from_slice(data.obs_row(batch[shuffle[k]]));
                labels.push(0.0);
            }
            for row in inputs.chunks_exact_mut(width) {
                for ((v, m), s) in row.iter_mut().zip(&shift).zip(&scale) {
                    *v = (*v - m) / s;
                }
            }
            for g in grads.iter_mut() {
                g.weights.iter_mut().for_each(|x| *x = 0.0);
                g.bias.iter_mut().for_each(|x| *x = 0.0);
            }
            let loss = net.bce_step(&inputs, &labels, &mut grads);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_index,
                    loss,
                });
            }
            adam.step(&mut net, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
    }
    RatioModel::new(net, dt, dx, Some(last_epoch_loss))?.with_standardization(shift, scale)
}

/// Per-column mean and standard deviation of the first `n` `(theta, obs)`
/// rows; constant columns get scale 1.
fn column_moments(data: &TrainingSet, n: usize) -> (Vec<f64>, Vec<f64>) {
    let width = data.theta_dim + data.obs_dim;
    let row = |i: usize| data.theta_row(i).iter().chain(data.obs_row(i));
    let mut mean = vec![0.0; width];
    for i in 0..n {
        mean.iter_mut().zip(row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for i in 0..n {
        var.iter_mut()
            .zip(row(i))
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Draws a fresh training set from `sim` (stream `"sim"` of the seed) and fits
/// one model.
pub fn train_ratio<S: Simulator + ?Sized>(sim: &S, config: &TrainConfig) -> Result<RatioModel> {
    config.validate()?;
    let data = simulate_training_set(sim, config.sample_count, derive_seed(config.seed, "sim"));
    fit_ratio(&data, config)
}

/// Fits `members` models on the same data with independent seeds; members
/// train concurrently and are returned in index order.
pub fn train_ensemble(
    data: &TrainingSet,
    config: &TrainConfig,
    members: usize,
) -> Result<RatioEnsemble> {
    if members == 0 {
        return Err(Error::Config(
            "an ensemble needs at least one member".into(),
        ));
    }
    let models: Result<Vec<RatioModel>> = (0..members)
        .into_par_iter()
        .map(|m| {
            let cfg = TrainConfig {
                seed: indexed_seed(derive_seed(config.seed, "member"), m as u64),
                ..config.clone()
            };
            fit_ratio(data, &cfg)
        })
        .collect();
    RatioEnsemble::new(models?)
}

/// Averages member logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioEnsemble {
    members: Vec<RatioModel>,
}

impl RatioEnsemble {
    pub fn new(members: Vec<RatioModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Contract("empty ensemble".into()))?;
        for m in &members {
            if m.theta_dim != first.theta_dim || m.obs_dim != first.obs_dim {
                return Err(Error::Contract(
                    "ensemble members disagree on input layout".into(),
                ));
            }
        }
        Ok(Self { members })
    }

    pub fn single(model: RatioModel) -> Self {
        Self {
            members: vec![model],
        }
    }

    pub fn members(&self) -> &[RatioModel] {
        &self.members
    }

    pub fn theta_dim(&self) -> usize {
        self.members[0].theta_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.members[0].obs_dim
    }

    /// Mean logit at `(theta, obs)` and its ambient gradient with respect to theta.
    pub fn ensemble_logit(&self, theta: &ManifoldPoint, obs: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.members[0].check_layout(theta.coords(), obs)?;
        let mut value = [0.0];
        let mut grad = vec![0.0; self.theta_dim()];
        self.logits_batch(theta.coords(), obs, &mut value, &mut grad);
        Ok((value[0], grad))
    }

    /// Mean logits and theta gradients for many parameters sharing one observation.
    pub fn logits_batch(
        &self,
        thetas: &[f64],
        obs: &[f64],
        values: &mut [f64],
        theta_grads: &mut [f64],
    ) {
        let dt = self.theta_dim();
        let dx = self.obs_dim();
        let rows = thetas.len() / dt;
        let width = dt + dx;
        let mut inputs = Vec::with_capacity(rows * width);
        for t in thetas.chunks_exact(dt) {
            inputs.extend_from_slice(t);
            inputs.extend_from_slice(obs);
        }
        let mut scaled = vec![0.0; rows * width];
        let mut out = vec![0.0; rows];
        let mut in_grad = vec![0.0; rows * width];
        values[..rows].iter_mut().for_each(|v| *v = 0.0);
        theta_grads[..rows * dt].iter_mut().for_each(|v| *v = 0.0);
        for m in &self.members {
            scaled.copy_from_slice(&inputs);
            m.standardize(&mut scaled);
            m.net.input_gradient_batch(&scaled, &mut out, &mut in_grad);
            for i in 0..rows {
                values[i] += out[i];
                for j in 0..dt {
                    theta_grads[i * dt + j] += in_grad[i * width + j] / m.scale[j];
                }
            }
        }
        let k = self.members.len() as f64;
        values[..rows].iter_mut().for_each(|v| *v /= k);
        theta_grads[..rows * dt].iter_mut().for_each(|v| *v /= k);
    }
}

/// Log-ratio of an ensemble at a fixed observation, as a density over theta.
#[derive(Clone, Debug)]
pub struct ObservedRatio {
    ensemble: Arc<RatioEnsemble>,
    observation: Vec<f64>,
    spec: ManifoldSpec,
}

impl ObservedRatio {
    pub fn new(
        ensemble: Arc<RatioEnsemble>,
        observation: Vec<f64>,
        spec: ManifoldSpec,
    ) -> Result<Self> {
        if spec.ambient_dim() != ensemble.theta_dim() {
            return Err(Error::dims(
                "ratio parameter space",
                ensemble.theta_dim(),
                spec.ambient_dim(),
            ));
        }
        if observation.len() != ensemble.obs_dim() {
            return Err(Error::dims(
                "observation",
                ensemble.obs_dim(),
                observation.len(),
            ));
        }
        Ok(Self {
            ensemble,
            observation,
            spec,
        })
    }

    pub fn ensemble(&self) -> &RatioEnsemble {
        &self.ensemble
    }
}

impl LogDensity for ObservedRatio {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        let mut v = [0.0];
        self.ensemble
            .logits_batch(point, &self.observation, &mut v, gradient);
        v[0]
    }

    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        self.ensemble
            .logits_batch(points, &self.observation, values, gradients);
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MLP_HEADER: &str = "geosbi-mlp v1";
const MODEL_HEADER: &str = "geosbi-ratio-model v1";
const ENSEMBLE_HEADER: &str = "geosbi-ratio-ensemble v1";

impl Mlp {
    /// Text form: header, one `dense <in> <out> <activation>` line per layer
    /// followed by a `w` line (row-major weights) and a `b` line. Floats use
    /// Rust's shortest round-trip formatting, so parsing restores every bit.
    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "{MLP_HEADER}");
        let _ = writeln!(out, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(
                out,
                "dense {} {} {}",
                l.inputs,
                l.outputs,
                l.activation.tag()
            );
            write_floats(out, "w", &l.weights);
            write_floats(out, "b", &l.bias);
        }
    }

    fn read_text(lines: &mut LineCursor<'_>) -> Result<Self> {
        lines.expect_exact(MLP_HEADER)?;
        let count: usize = lines.keyed_value("layers")?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines.next_line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "dense" {
                return Err(lines.error(
                    n,
                    format!("expected `dense <in> <out> <activation>`, got {line:?}"),
                ));
            }
            let inputs: usize = parts[1]
                .parse()
                .map_err(|_| lines.error(n, "bad input width"))?;
            let outputs: usize = parts[2]
                .parse()
                .map_err(|_| lines.error(n, "bad output width"))?;
            let activation = Activation::from_tag(parts[3])
                .ok_or_else(|| lines.error(n, format!("unknown activation {:?}", parts[3])))?;
            let weights = lines.floats("w", inputs * outputs)?;
            let bias = lines.floats("b", outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
                activation,
            });
        }
        Mlp::from_layers(layers)
    }
}

impl RatioModel {
    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "{MODEL_HEADER}");
        let _ = writeln!(out, "theta_dim {}", self.theta_dim);
        let _ = writeln!(out, "obs_dim {}", self.obs_dim);
        match self.final_loss {
            Some(l) => {
                let _ = writeln!(out, "final_loss {l:?}");
            }
            None => {
                let _ = writeln!(out, "final_loss none");
            }
        }
        write_floats(out, "shift", &self.shift);
        write_floats(out, "scale", &self.scale);
        self.net.write_text(out);
    }

    fn read_text(lines: &mut LineCursor<'_>) -> Result<Self> {
        lines.expect_exact(MODEL_HEADER)?;
        let theta_dim: usize = lines.keyed_value("theta_dim")?;
        let obs_dim: usize = lines.keyed_value("obs_dim")?;
        let loss: String = lines.keyed_value("final_loss")?;
        let final_loss = if loss == "none" {
            None
        } else {
            Some(
                loss.parse()
                    .map_err(|_| lines.error(lines.line_no(), "bad final_loss"))?,
            )
        };
        let shift = lines.floats("shift", theta_dim + obs_dim)?;
        let scale = lines.floats("scale", theta_dim + obs_dim)?;
        let net = Mlp::read_text(lines)?;
        RatioModel::new(net, theta_dim, obs_dim, final_loss)?
            .with_standardization(shift, scale)
            .map_err(|e| lines.error(lines.line_no(), e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = LineCursor::new(text, source);
        let m = Self::read_text(&mut lines)?;
        lines.expect_end()?;
        Ok(m)
    }
}

impl RatioEnsemble {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{ENSEMBLE_HEADER}");
        let _ = writeln!(s, "members {}", self.members.len());
        for m in &self.members {
            m.write_text(&mut s);
        }
        s
    }

    /// Parses an ensemble file; a bare model file loads as a one-member ensemble.
    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = LineCursor::new(text, source);
        if lines.peek() == Some(MODEL_HEADER) {
            let m = RatioModel::read_text(&mut lines)?;
            lines.expect_end()?;
            return Ok(Self::single(m));
        }
        lines.expect_exact(ENSEMBLE_HEADER)?;
        let count: usize = lines.keyed_value("members")?;
        let members = (0..count)
            .map(|_| RatioModel::read_text(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        lines.expect_end()?;
        Self::new(members)
    }
}

fn write_floats(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

/// Line reader with 1-based line numbers for error messages; skips blank lines.
pub(crate) struct LineCursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    source: String,
}

impl<'a> LineCursor<'a> {
    pub(crate) fn new(text: &'a str, source: &str) -> Self {
        Self {
            lines: text
                .lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty())
                .collect(),
            pos: 0,
            source: source.to_string(),
        }
    }

    pub(crate) fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line,
            message: message.into(),
        }
    }

    fn line_no(&self) -> usize {
        self.lines
            .get(self.pos.saturating_sub(1))
            .map_or(0, |l| l.0)
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).map(|l| l.1)
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let l = self.lines.get(self.pos).copied().ok_or_else(|| {
            let last = self.lines.last().map_or(0, |l| l.0);
            self.error(last + 1, "unexpected end of file")
        })?;
        self.pos += 1;
        Ok(l)
    }

    fn expect_exact(&mut self, expected: &str) -> Result<()> {
        let (n, line) = self.next_line()?;
        if line != expected {
            return Err(self.error(n, format!("expected {expected:?}, got {line:?}")));
        }
        Ok(())
    }

    fn expect_end(&self) -> Result<()> {
        if let Some(&(n, l)) = self.lines.get(self.pos) {
            return Err(self.error(n, format!("trailing content {l:?}")));
        }
        Ok(())
    }

    fn keyed_value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(n, format!("expected `{key} <value>`, got {line:?}")));
        }
        let value = parts
            .next()
            .ok_or_else(|| self.error(n, format!("missing value for {key}")))?;
        if parts.next().is_some() {
            return Err(self.error(n, format!("extra tokens after {key}")));
        }
        value
            .parse()
            .map_err(|_| self.error(n, format!("bad value {value:?} for {key}")))
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(n, format!("expected `{key}` row")));
        }
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| self.error(n, format!("bad number {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(self.error(
                n,
                format!("expected {count} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }
}
