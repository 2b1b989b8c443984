//! Encoder/decoder pair mapping the unit parameter box to a low-dimensional
//! latent box and back.
//!
//! Both networks are small multilayer perceptrons with sigmoid outputs, so
//! latent codes and reconstructions always stay strictly inside the unit box.
//! The training loss is the batch mean squared reconstruction error plus a KL
//! penalty that pulls the batch mean and standard deviation of every latent
//! coordinate toward a standard normal. Gradients are computed by hand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent standard deviations are floored here before entering the KL term.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            // Symmetric subgradient at the kink. Exact zeros do occur: a
            // dead upstream layer leaves only the (zero-initialized) bias.
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else if pre == 0.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

/// Fully connected layer `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    weights: DMatrix<f64>,
    biases: DVector<f64>,
    activation: Activation,
}

impl MlpLayer {
    /// `weights` are row-major with shape `outputs × inputs`.
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidConfig("layers need at least one input and output".into()));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::DimensionMismatch {
                expected: inputs * outputs,
                got: weights.len(),
            });
        }
        if biases.len() != outputs {
            return Err(Error::DimensionMismatch {
                expected: outputs,
                got: biases.len(),
            });
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights: DMatrix::from_row_slice(outputs, inputs, &weights),
            biases: DVector::from_vec(biases),
            activation,
        })
    }

    fn xavier<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weights: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-a..a)),
            biases: DVector::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights_row_major(&self) -> Vec<f64> {
        self.weights.transpose().as_slice().to_vec()
    }

    pub fn biases(&self) -> &[f64] {
        self.biases.as_slice()
    }

    fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Pre-activations and outputs for a batch stored one sample per column.
    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut pre = &self.weights * x;
        for mut col in pre.column_iter_mut() {
            col += &self.biases;
        }
        let out = pre.map(|v| self.activation.apply(v));
        (pre, out)
    }
}

/// Gradient of a loss with respect to one layer.
#[derive(Debug, Clone)]
struct LayerGrad {
    weights: DMatrix<f64>,
    biases: DVector<f64>,
}

struct Trace {
    /// Inputs to every layer followed by the final output.
    acts: Vec<DMatrix<f64>>,
    pres: Vec<DMatrix<f64>>,
}

fn forward_traced(layers: &[MlpLayer], x: DMatrix<f64>) -> Trace {
    let mut acts = vec![x];
    let mut pres = Vec::with_capacity(layers.len());
    for layer in layers {
        let (pre, out) = layer.forward(acts.last().expect("input present"));
        pres.push(pre);
        acts.push(out);
    }
    Trace { acts, pres }
}

/// Backpropagate `d_out` (gradient w.r.t. the final outputs) through the
/// traced layers; returns per-layer gradients and the input gradient.
fn backward(layers: &[MlpLayer], trace: &Trace, d_out: DMatrix<f64>) -> (Vec<LayerGrad>, DMatrix<f64>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = d_out;
    for (k, layer) in layers.iter().enumerate().rev() {
        let pre = &trace.pres[k];
        let out = &trace.acts[k + 1];
        let dz = DMatrix::from_fn(delta.nrows(), delta.ncols(), |i, j| {
            delta[(i, j)] * layer.activation.derivative(pre[(i, j)], out[(i, j)])
        });
        let input = &trace.acts[k];
        grads.push(LayerGrad {
            weights: &dz * input.transpose(),
            biases: dz.column_sum(),
        });
        delta = layer.weights.tr_mul(&dz);
    }
    grads.reverse();
    (grads, delta)
}

/// `½(μ² + σ² − 1 − ln σ²)`: KL divergence of `N(μ, σ²)` from `N(0, 1)`.
pub fn gaussian_kl(mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * (mu * mu + s2 - 1.0 - s2.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    encoder: Vec<MlpLayer>,
    decoder: Vec<MlpLayer>,
    d_high: usize,
    d_low: usize,
    kl_weight: f64,
}

impl VaeModel {
    /// The standard layer schedule: encoder `⌊d/2⌋, ⌊d/4⌋, d_low`, decoder
    /// `⌊d/4⌋, ⌊d/2⌋, d`, ReLU hidden layers, Xavier-uniform weights.
    pub fn new(d_high: usize, d_low: usize, kl_weight: f64, seed: u64) -> Result<Self> {
        Self::with_hidden(d_high, &[d_high / 2, d_high / 4], d_low, &[d_high / 4, d_high / 2], kl_weight, seed)
    }

    /// Arbitrary hidden widths with ReLU hidden layers and sigmoid outputs.
    pub fn with_hidden(
        d_high: usize,
        encoder_hidden: &[usize],
        d_low: usize,
        decoder_hidden: &[usize],
        kl_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        if d_high == 0 || d_low == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if let Some(w) = encoder_hidden.iter().chain(decoder_hidden).find(|w| **w == 0) {
            return Err(Error::InvalidConfig(format!(
                "hidden width {w} is zero; d_high = {d_high} is too small for this schedule"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = |widths: Vec<usize>, rng: &mut ChaCha8Rng| {
            let last = widths.len() - 2;
            widths
                .windows(2)
                .enumerate()
                .map(|(k, w)| {
                    let act = if k == last { Activation::Sigmoid } else { Activation::Relu };
                    MlpLayer::xavier(w[0], w[1], act, rng)
                })
                .collect::<Vec<_>>()
        };
        let enc_widths: Vec<usize> = std::iter::once(d_high).chain(encoder_hidden.iter().copied()).chain([d_low]).collect();
        let dec_widths: Vec<usize> = std::iter::once(d_low).chain(decoder_hidden.iter().copied()).chain([d_high]).collect();
        let encoder = build(enc_widths, &mut rng);
        let decoder = build(dec_widths, &mut rng);
        Self::from_layers(encoder, decoder, kl_weight)
    }

    pub fn from_layers(encoder: Vec<MlpLayer>, decoder: Vec<MlpLayer>, kl_weight: f64) -> Result<Self> {
        let chain_ok = |layers: &[MlpLayer]| layers.windows(2).all(|w| w[0].outputs() == w[1].inputs());
        let (Some(e0), Some(el), Some(d0), Some(dl)) = (encoder.first(), encoder.last(), decoder.first(), decoder.last()) else {
            return Err(Error::InvalidConfig("encoder and decoder need at least one layer".into()));
        };
        if !chain_ok(&encoder) || !chain_ok(&decoder) {
            return Err(Error::InvalidConfig("consecutive layer shapes do not match".into()));
        }
        if el.outputs() != d0.inputs() || dl.outputs() != e0.inputs() {
            return Err(Error::InvalidConfig("decoder must invert the encoder's shape".into()));
        }
        if el.activation != Activation::Sigmoid || dl.activation != Activation::Sigmoid {
            return Err(Error::InvalidConfig("encoder and decoder outputs must be sigmoid".into()));
        }
        if !(kl_weight.is_finite() && kl_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!("kl_weight must be non-negative, got {kl_weight}")));
        }
        Ok(Self {
            d_high: e0.inputs(),
            d_low: el.outputs(),
            encoder,
            decoder,
            kl_weight,
        })
    }

    pub fn d_high(&self) -> usize {
        self.d_high
    }

    pub fn d_low(&self) -> usize {
        self.d_low
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight
    }

    pub fn encoder(&self) -> &[MlpLayer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[MlpLayer] {
        &self.decoder
    }

    fn layers(&self) -> impl Iterator<Item = &MlpLayer> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(MlpLayer::parameter_count).sum()
    }

    /// All weights (row-major per layer) and biases, encoder first.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in self.layers() {
            out.extend(layer.weights_row_major());
            out.extend(layer.biases.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                got: params.len(),
            });
        }
        let mut k = 0;
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let (rows, cols) = layer.weights.shape();
            for i in 0..rows {
                for j in 0..cols {
                    layer.weights[(i, j)] = params[k];
                    k += 1;
                }
            }
            for b in layer.biases.iter_mut() {
                *b = params[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(dim, rows.len());
        for (j, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            if let Some(i) = r.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::OutOfUnitBox { index: i });
            }
            m.set_column(j, &DVector::from_column_slice(r));
        }
        Ok(m)
    }

    fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    fn run(layers: &[MlpLayer], x: DMatrix<f64>) -> DMatrix<f64> {
        layers.iter().fold(x, |a, l| l.forward(&a).1)
    }

    pub fn encode(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(&theta.to_vec()))?.remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(std::slice::from_ref(&z.to_vec()))?.remove(0))
    }

    pub fn encode_batch(&self, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = Self::to_matrix(thetas, self.d_high)?;
        Ok(Self::columns(&Self::run(&self.encoder, x)))
    }

    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let z = Self::to_matrix(zs, self.d_low)?;
        Ok(Self::columns(&Self::run(&self.decoder, z)))
    }

    /// `decode(encode(θ))` for every row.
    pub fn reconstruct_batch(&self, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = Self::to_matrix(thetas, self.d_high)?;
        Ok(Self::columns(&Self::run(&self.decoder, Self::run(&self.encoder, x))))
    }

    pub fn loss(&self, batch: &[Vec<f64>]) -> Result<LossParts> {
        Ok(self.evaluate(batch, false)?.0)
    }

    /// Loss and its gradient, flattened in [`VaeModel::parameters`] order.
    pub fn loss_and_gradient(&self, batch: &[Vec<f64>]) -> Result<(LossParts, Vec<f64>)> {
        let (loss, grad) = self.evaluate(batch, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn evaluate(&self, batch: &[Vec<f64>], want_grad: bool) -> Result<(LossParts, Option<Vec<f64>>)> {
        if batch.len() < 2 {
            return Err(Error::BatchTooSmall { got: batch.len(), min: 2 });
        }
        let n = batch.len() as f64;
        let x = Self::to_matrix(batch, self.d_high)?;
        let enc = forward_traced(&self.encoder, x.clone());
        let z = enc.acts.last().expect("encoder output").clone();
        let dec = forward_traced(&self.decoder, z.clone());
        let xhat = dec.acts.last().expect("decoder output");

        let diff = xhat - &x;
        let mse = diff.norm_squared() / n;

        let mut kl = 0.0;
        let mut stats = Vec::with_capacity(self.d_low);
        for row in z.row_iter() {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let floored = var.sqrt() < SIGMA_FLOOR;
            let sigma = if floored { SIGMA_FLOOR } else { var.sqrt() };
            kl += gaussian_kl(mu, sigma);
            stats.push((mu, sigma * sigma, floored));
        }
        let loss = LossParts {
            total: mse + self.kl_weight * kl,
            mse,
            kl,
        };
        if !want_grad {
            return Ok((loss, None));
        }

        let d_xhat = diff * (2.0 / n);
        let (dec_grads, mut d_z) = backward(&self.decoder, &dec, d_xhat);
        for (j, (mu, var, floored)) in stats.iter().enumerate() {
            for b in 0..batch.len() {
                let mut g = mu / n;
                if !floored {
                    g += (1.0 - 1.0 / var) * (z[(j, b)] - mu) / n;
                }
                d_z[(j, b)] += self.kl_weight * g;
            }
        }
        let (enc_grads, _) = backward(&self.encoder, &enc, d_z);

        let mut flat = Vec::with_capacity(self.parameter_count());
        for g in enc_grads.iter().chain(&dec_grads) {
            flat.extend(g.weights.transpose().iter());
            flat.extend(g.biases.iter());
        }
        Ok((loss, Some(flat)))
    }

    /// Shift every bias so that each unit's pre-activation has zero mean
    /// over `samples`, layer by layer. Parameter vectors cluster in a small
    /// part of the unit box, and with zero biases whole ReLU units would
    /// otherwise start out dead for every sample.
    pub fn center_biases(&mut self, samples: &[Vec<f64>]) -> Result<()> {
        let n = samples.len() as f64;
        let mut a = Self::to_matrix(samples, self.d_high)?;
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let pre = &layer.weights * &a;
            for (i, row) in pre.row_iter().enumerate() {
                layer.biases[i] = -row.sum() / n;
            }
            a = layer.forward(&a).1;
        }
        Ok(())
    }

    /// Smallest `|pre-activation|` over all ReLU units and batch rows. Finite
    /// differences with a step well below this never cross a kink.
    pub fn relu_margin(&self, batch: &[Vec<f64>]) -> Result<f64> {
        let mut a = Self::to_matrix(batch, self.d_high)?;
        let mut margin = f64::INFINITY;
        for layer in self.layers() {
            let (pre, out) = layer.forward(&a);
            if layer.activation == Activation::Relu {
                margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            a = out;
        }
        Ok(margin)
    }

    /// Largest relative difference between the analytic gradient and central
    /// finite differences with step `1e-5`.
    ///
    /// The relative error of component `k` is `|a − n| / max(|a|, |n|, f)`
    /// with floor `f = 1e-6 · max(1, |loss|)`: below that magnitude a central
    /// difference is dominated by round-off in the loss itself.
    pub fn gradient_check(&self, batch: &[Vec<f64>]) -> Result<f64> {
        self.gradient_check_with_step(batch, 1e-5)
    }

    pub fn gradient_check_with_step(&self, batch: &[Vec<f64>], step: f64) -> Result<f64> {
        let (loss, analytic) = self.loss_and_gradient(batch)?;
        let floor = 1e-6 * loss.total.abs().max(1.0);
        let base = self.parameters();
        let mut probe = self.clone();
        let mut params = base.clone();
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            params[k] = base[k] + step;
            probe.set_parameters(&params)?;
            let up = probe.loss(batch)?.total;
            params[k] = base[k] - step;
            probe.set_parameters(&params)?;
            let down = probe.loss(batch)?.total;
            params[k] = base[k];
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` given `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation loss.
    pub patience: usize,
    pub validation_fraction: f64,
    pub kl_weight: f64,
    /// Center biases on the training data before the first epoch.
    pub center_biases: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 500,
            patience: 50,
            validation_fraction: 0.1,
            kl_weight: 1.0,
            center_biases: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossParts,
    pub validation: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// The model with the lowest validation loss.
    pub model: VaeModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl TrainReport {
    pub fn best_validation(&self) -> LossParts {
        self.history[self.best_epoch].validation
    }
}

/// Train a model with the standard layer schedule.
pub fn train(samples: &[Vec<f64>], d_low: usize, config: &TrainConfig) -> Result<TrainReport> {
    let d_high = samples.first().map_or(0, Vec::len);
    let model = VaeModel::new(d_high, d_low, config.kl_weight, config.seed)?;
    train_model(model, samples, config)
}

/// Train an existing model in place of a freshly initialized one.
pub fn train_model(mut model: VaeModel, samples: &[Vec<f64>], config: &TrainConfig) -> Result<TrainReport> {
    if config.batch_size < 2 || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("batch size >= 2, epochs >= 1 and a positive learning rate are required".into()));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
    }
    let needed = 2 * config.batch_size;
    if samples.len() < needed {
        return Err(Error::InsufficientData {
            got: samples.len(),
            needed,
        });
    }
    model.kl_weight = config.kl_weight;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1_0000);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).max(2);
    let validation_indices: Vec<usize> = order[..n_val].to_vec();
    let mut train_indices: Vec<usize> = order[n_val..].to_vec();
    let validation: Vec<Vec<f64>> = validation_indices.iter().map(|&i| samples[i].clone()).collect();
    let report_indices = train_indices.clone();
    if config.center_biases {
        let train_set: Vec<Vec<f64>> = train_indices.iter().map(|&i| samples[i].clone()).collect();
        model.center_biases(&train_set)?;
    }

    let mut params = model.parameters();
    let mut adam = AdamState::new(params.len(), config.learning_rate);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        train_indices.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = train_indices.chunks(config.batch_size).collect();
        // A trailing singleton has no batch statistics; fold it into its neighbor.
        let tail_len = chunks.last().map_or(0, |c| c.len());
        if tail_len < 2 && chunks.len() > 1 {
            chunks.pop();
            let merged = chunks.len() - 1;
            let start = merged * config.batch_size;
            chunks[merged] = &train_indices[start..];
        }
        let mut sums = LossParts { total: 0.0, mse: 0.0, kl: 0.0 };
        for chunk in &chunks {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            adam.update(&mut params, &grad);
            model.set_parameters(&params)?;
            sums.total += loss.total;
            sums.mse += loss.mse;
            sums.kl += loss.kl;
        }
        let k = chunks.len() as f64;
        let train_loss = LossParts {
            total: sums.total / k,
            mse: sums.mse / k,
            kl: sums.kl / k,
        };
        let val = model.loss(&validation)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteCost(val.total));
        }
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            validation: val,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val.total < *b) {
            best = Some((val.total, epoch, params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= config.patience {
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    model.set_parameters(&best_params)?;
    Ok(TrainReport {
        model,
        best_epoch,
        history,
        train_indices: report_indices,
        validation_indices,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

/// On-disk model format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d_high: usize,
    pub d_low: usize,
    pub kl_weight: f64,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
}

fn records(layers: &[MlpLayer]) -> Vec<LayerRecord> {
    layers
        .iter()
        .map(|l| LayerRecord {
            inputs: l.inputs(),
            outputs: l.outputs(),
            activation: l.activation,
            weights: l.weights_row_major(),
            biases: l.biases().to_vec(),
        })
        .collect()
}

fn from_records(recs: Vec<LayerRecord>) -> Result<Vec<MlpLayer>> {
    recs.into_iter()
        .map(|r| MlpLayer::new(r.inputs, r.outputs, r.weights, r.biases, r.activation))
        .collect()
}

impl VaeModel {
    pub fn checkpoint(&self, training: Option<&TrainConfig>) -> Checkpoint {
        Checkpoint {
            d_high: self.d_high,
            d_low: self.d_low,
            kl_weight: self.kl_weight,
            encoder_widths: std::iter::once(self.d_high).chain(self.encoder.iter().map(MlpLayer::outputs)).collect(),
            decoder_widths: std::iter::once(self.d_low).chain(self.decoder.iter().map(MlpLayer::outputs)).collect(),
            training: training.cloned(),
            encoder: records(&self.encoder),
            decoder: records(&self.decoder),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let model = Self::from_layers(from_records(c.encoder)?, from_records(c.decoder)?, c.kl_weight)?;
        if model.d_high != c.d_high || model.d_low != c.d_low {
            return Err(Error::InvalidConfig("checkpoint header disagrees with its layers".into()));
        }
        Ok(model)
    }

    pub fn write_json<W: Write>(&self, training: Option<&TrainConfig>, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.checkpoint(training))?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<(Self, Option<TrainConfig>)> {
        let c: Checkpoint = serde_json::from_reader(reader)?;
        let training = c.training.clone();
        Ok((Self::from_checkpoint(c)?, training))
    }

    pub fn save(&self, training: Option<&TrainConfig>, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_json(training, &mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainConfig>)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_json(BufReader::new(file))
    }
}
