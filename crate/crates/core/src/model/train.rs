use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Head, ModelParams};
use super::{Dataset, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "one")]
    pub rounds: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            l2_lambda: 1e-4,
            local_epochs: 1,
            rounds: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::Config(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(ModelError::Config(format!(
                "l2_lambda must be >= 0, got {}",
                self.l2_lambda
            )));
        }
        if self.local_epochs == 0 || self.rounds == 0 {
            return Err(ModelError::Config(
                "local_epochs and rounds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Layer outputs `a_0 = x, a_1, ..., a_n`; the last entry holds probabilities
/// for a softmax head and raw outputs for a linear head.
pub fn forward(params: &ModelParams, x: &[f64]) -> Vec<Vec<f64>> {
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in params.layers.iter().enumerate() {
        let input = acts.last().expect("non-empty");
        let mut z: Vec<f64> = layer
            .weights
            .chunks_exact(layer.inputs)
            .zip(&layer.biases)
            .map(|(row, b)| row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + b)
            .collect();
        if i == last {
            if params.arch.head == Head::SoftmaxCrossEntropy {
                softmax_in_place(&mut z);
            }
        } else {
            let act = params.arch.activation;
            z.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        acts.push(z);
    }
    acts
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn target(head: Head, outputs: usize, label: usize) -> Vec<f64> {
    match (head, outputs) {
        (Head::LinearSquared, 1) => vec![label as f64],
        _ => (0..outputs).map(|c| f64::from(u8::from(c == label))).collect(),
    }
}

fn loss_from_output(head: Head, out: &[f64], label: usize) -> f64 {
    match head {
        // Floor keeps the loss finite when a probability underflows to zero.
        Head::SoftmaxCrossEntropy => -out[label].max(1e-300).ln(),
        Head::LinearSquared => {
            let t = target(head, out.len(), label);
            0.5 * out.iter().zip(&t).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
        }
    }
}

/// Unregularized per-example loss `J(θ, x, y)`.
pub fn example_loss(params: &ModelParams, x: &[f64], label: usize) -> f64 {
    let acts = forward(params, x);
    loss_from_output(params.arch.head, acts.last().expect("output"), label)
}

/// Mean unregularized loss over a dataset.
pub fn mean_loss(params: &ModelParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| example_loss(params, x, y))
        .sum::<f64>()
        / data.len() as f64
}

/// Analytic gradient `∇θ J(θ, x, y)` by backpropagation, with the example loss.
pub fn gradient(
    params: &ModelParams,
    x: &[f64],
    label: usize,
) -> Result<(ModelParams, f64), ModelError> {
    if x.len() != params.arch.inputs() {
        return Err(ModelError::Structure(format!(
            "example has {} features, model expects {}",
            x.len(),
            params.arch.inputs()
        )));
    }
    if params.arch.head == Head::SoftmaxCrossEntropy && label >= params.arch.outputs() {
        return Err(ModelError::Structure(format!(
            "label {label} outside {} outputs",
            params.arch.outputs()
        )));
    }
    let acts = forward(params, x);
    let out = acts.last().expect("output");
    let head = params.arch.head;
    let loss = loss_from_output(head, out, label);
    let t = target(head, out.len(), label);
    // Both heads give dL/dz = output - target at the last layer.
    let mut delta: Vec<f64> = out.iter().zip(&t).map(|(o, t)| o - t).collect();

    let mut grads = ModelParams::zeros(&params.arch)?;
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &acts[l];
        let g = &mut grads.layers[l];
        for (o, d) in delta.iter().enumerate() {
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (gw, a) in row.iter_mut().zip(input) {
                *gw = d * a;
            }
            g.biases[o] = *d;
        }
        if g.weights.iter().chain(&g.biases).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
        if l > 0 {
            let act = params.arch.activation;
            delta = (0..layer.inputs)
                .map(|i| {
                    let back: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(o, d)| layer.weight(o, i) * d)
                        .sum();
                    back * act.derivative_from_output(input[i])
                })
                .collect();
        }
    }
    Ok((grads, loss))
}

/// Per-example SGD with L2 on weights: `θ ← θ − α(∇θ J + λθ)`.
///
/// Example order is reshuffled every epoch from `seed`. Biases are not
/// regularized.
pub fn train_local(
    params: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    params.check_shape()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Structure("training split is empty".into()));
    }
    if data.dims() != params.arch.inputs() {
        return Err(ModelError::Structure(format!(
            "dataset has {} features, model expects {}",
            data.dims(),
            params.arch.inputs()
        )));
    }
    let mut theta = params.clone();
    if cfg.learning_rate == 0.0 {
        return Ok(theta);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (alpha, lambda) = (cfg.learning_rate, cfg.l2_lambda);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (g, _) = gradient(&theta, &data.features[i], data.labels[i])?;
            for (l, (layer, gl)) in theta.layers.iter_mut().zip(&g.layers).enumerate() {
                for (w, gw) in layer.weights.iter_mut().zip(&gl.weights) {
                    *w -= alpha * (gw + lambda * *w);
                }
                for (b, gb) in layer.biases.iter_mut().zip(&gl.biases) {
                    *b -= alpha * gb;
                }
                if layer
                    .weights
                    .iter()
                    .chain(&layer.biases)
                    .any(|v| !v.is_finite())
                {
                    return Err(ModelError::NonFinite { layer: l });
                }
            }
        }
    }
    Ok(theta)
}
