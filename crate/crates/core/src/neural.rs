//! Fully connected networks in `f64`: forward pass, backpropagation, SGD and
//! Adam updates, and an early-stopping training loop.
//!
//! Checkpoints serialize as JSON with the layout
//!
//! ```json
//! { "format": "arblab.dense_net", "version": 1,
//!   "widths": [4, 8, 1], "activations": ["relu", "identity"],
//!   "params": [ /* layer 0 weights (row-major, out x in), layer 0 biases, layer 1 ... */ ] }
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Layer {
    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let z = row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi);
            out.push(self.activation.apply(z));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetFile", try_from = "NetFile")]
pub struct DenseNet {
    layers: Vec<Layer>,
}

const NET_FORMAT: &str = "arblab.dense_net";
const NET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetFile {
    format: String,
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl From<DenseNet> for NetFile {
    fn from(net: DenseNet) -> Self {
        NetFile {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            widths: net.widths(),
            activations: net.activations(),
            params: net.flat_params(),
        }
    }
}

impl TryFrom<NetFile> for DenseNet {
    type Error = Error;

    fn try_from(file: NetFile) -> Result<Self> {
        if file.format != NET_FORMAT || file.version != NET_VERSION {
            return Err(Error::Validation(format!(
                "unsupported network checkpoint {} v{}",
                file.format, file.version
            )));
        }
        DenseNet::from_flat(&file.widths, &file.activations, &file.params)
    }
}

fn check_shape(widths: &[usize], activations: &[Activation]) -> Result<()> {
    if widths.len() < 2 {
        return Err(invalid(
            "a network needs at least an input and an output width",
        ));
    }
    if activations.len() != widths.len() - 1 {
        return Err(invalid(format!(
            "{} activations given for {} layers",
            activations.len(),
            widths.len() - 1
        )));
    }
    if widths.contains(&0) {
        return Err(invalid("layer widths must be positive"));
    }
    Ok(())
}

pub fn param_count_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// Weights uniform in `±sqrt(1 / fan_in)`, biases zero.
    pub fn init(widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        check_shape(widths, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (inputs, outputs) = (w[0], w[1]);
                let scale = (1.0 / inputs as f64).sqrt();
                Layer {
                    weights: (0..inputs * outputs)
                        .map(|_| rng.random_range(-scale..scale))
                        .collect(),
                    bias: vec![0.0; outputs],
                    inputs,
                    outputs,
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_flat(widths: &[usize], activations: &[Activation], params: &[f64]) -> Result<Self> {
        check_shape(widths, activations)?;
        if params.len() != param_count_for(widths) {
            return Err(invalid(format!(
                "expected {} parameters for widths {widths:?}, got {}",
                param_count_for(widths),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation(
                "network parameters must be finite".into(),
            ));
        }
        let mut offset = 0;
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (inputs, outputs) = (w[0], w[1]);
                let weights = params[offset..offset + inputs * outputs].to_vec();
                offset += inputs * outputs;
                let bias = params[offset..offset + outputs].to_vec();
                offset += outputs;
                Layer {
                    weights,
                    bias,
                    inputs,
                    outputs,
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        param_count_for(&self.widths())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Parameter tensors in checkpoint order: w0, b0, w1, b1, ...
    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(invalid(format!(
                "input width {} does not match network input width {}",
                input.len(),
                self.input_width()
            )));
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine_into(&current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Post-activation outputs of every layer, input first.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine_into(trace.last().unwrap(), &mut out);
            trace.push(out);
        }
        trace
    }

    /// Adds `dL/dθ` for one sample into `grads`, given `dL/d(output)`
    /// computed from the network output by `output_grad`.
    fn backprop_sample(
        &self,
        input: &[f64],
        grads: &mut Gradients,
        output_grad: impl FnOnce(&[f64]) -> Vec<f64>,
    ) {
        let trace = self.forward_trace(input);
        let mut delta = output_grad(trace.last().unwrap());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace[li + 1];
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(y);
            }
            let x = &trace[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &xi) in row.iter_mut().zip(x) {
                    *gw += d * xi;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Loss and gradient over a batch of `(input, target)` pairs.
    pub fn backward(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        loss: Loss,
    ) -> Result<(Gradients, f64)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(invalid(
                "backward needs a non-empty batch with one target per input",
            ));
        }
        let out_w = self.output_width();
        for (x, t) in inputs.iter().zip(targets) {
            if x.len() != self.input_width() || t.len() != out_w {
                return Err(invalid("batch sample width does not match the network"));
            }
        }
        let n = (inputs.len() * out_w) as f64;
        let mse = inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| {
                self.forward_unchecked(x)
                    .iter()
                    .zip(t)
                    .map(|(y, t)| (y - t) * (y - t))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        let (value, scale) = match loss {
            Loss::Mse => (mse, 1.0),
            Loss::Rmse => {
                let rmse = mse.sqrt();
                (rmse, if rmse > 0.0 { 0.5 / rmse } else { 0.0 })
            }
        };
        let mut grads = Gradients::zeros_like(self);
        for (x, t) in inputs.iter().zip(targets) {
            self.backprop_sample(x, &mut grads, |y| {
                y.iter()
                    .zip(t)
                    .map(|(y, t)| scale * 2.0 * (y - t) / n)
                    .collect()
            });
        }
        Ok((grads, value))
    }

    /// Mean squared error on one selected output per sample, the Q-learning
    /// loss `mean((Q(s, a) - target)^2)`.
    pub fn backward_selected(
        &self,
        inputs: &[&[f64]],
        selected: &[usize],
        targets: &[f64],
    ) -> Result<(Gradients, f64)> {
        if inputs.is_empty() || inputs.len() != selected.len() || inputs.len() != targets.len() {
            return Err(invalid(
                "selected-output batch must be non-empty and aligned",
            ));
        }
        let n = inputs.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for ((x, &a), &t) in inputs.iter().zip(selected).zip(targets) {
            if a >= self.output_width() || x.len() != self.input_width() {
                return Err(invalid("selected output or input width out of range"));
            }
            self.backprop_sample(x, &mut grads, |y| {
                let err = y[a] - t;
                loss += err * err;
                let mut d = vec![0.0; y.len()];
                d[a] = 2.0 * err / n;
                d
            });
        }
        Ok((grads, loss / n))
    }

    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>], loss: Loss) -> Result<f64> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(invalid("loss needs a non-empty aligned batch"));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x, t) in inputs.iter().zip(targets) {
            let y = self.forward(x)?;
            if y.len() != t.len() {
                return Err(invalid("target width does not match network output"));
            }
            sum += y.iter().zip(t).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
            n += t.len();
        }
        let mse = sum / n as f64;
        Ok(match loss {
            Loss::Mse => mse,
            Loss::Rmse => mse.sqrt(),
        })
    }

    /// Largest absolute parameter difference; the networks must share a shape.
    pub fn max_abs_diff(&self, other: &DenseNet) -> f64 {
        self.flat_params()
            .iter()
            .zip(other.flat_params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Rmse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient with the same layout as the network it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for l in &mut self.layers {
                l.weights
                    .iter_mut()
                    .chain(l.bias.iter_mut())
                    .for_each(|g| *g *= s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in net.tensors_mut().zip(grads.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.tensors().map(|g| vec![0.0; g.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                self.step += 1;
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in net
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Supervised samples with vector targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Samples {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(invalid("inputs and targets differ in length"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            optimizer: OptimizerKind::Adam,
            loss: Loss::Rmse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(invalid("learning rate must be positive"));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid(
                "patience, batch size and max epochs must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_validation_loss(&self) -> f64 {
        self.validation_loss[self.best_epoch]
    }
}

/// Minibatch training with early stopping on the validation loss. Returns
/// the parameters of the best validation epoch. When `validation` is empty
/// the training loss drives stopping instead.
pub fn train(
    mut net: DenseNet,
    train_set: &Samples,
    validation: &Samples,
    config: &TrainConfig,
) -> Result<(DenseNet, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, net.clone());
    let mut stale = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train_set.inputs[i].clone()).collect();
            let ts: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| train_set.targets[i].clone())
                .collect();
            let (grads, _) = net.backward(&xs, &ts, config.loss)?;
            optimizer.step(&mut net, &grads);
        }
        let train_loss = net.loss(&train_set.inputs, &train_set.targets, config.loss)?;
        let val_loss = if validation.is_empty() {
            train_loss
        } else {
            net.loss(&validation.inputs, &validation.targets, config.loss)?
        };
        if !val_loss.is_finite() {
            return Err(Error::State(format!("training diverged at epoch {epoch}")));
        }
        history.train_loss.push(train_loss);
        history.validation_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, net.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}
