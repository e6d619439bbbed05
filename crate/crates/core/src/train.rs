//! Mini-batch training: backpropagation through the embedding and dense
//! layers, categorical cross-entropy on the batch nodes, Adam updates.
//!
//! Every batch runs a full-graph forward pass (no neighbour sampling) under
//! a fresh dropout mask; only the batch nodes contribute to the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{DenseMatrix, RngStream};
use crate::model::{
    accuracy, forward_trace, full_forward, masked, mean_aggregate_transpose, sample_dropout_mask,
    Activation, Architecture, DropoutMasks, ModelParams,
};
use crate::streams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    #[serde(default)]
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            learning_rate: 0.001,
            epochs: 50,
            seed: 0,
            dropout_rate: 0.1,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::arg("batch size and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Mean cross-entropy of `targets` and its gradient with respect to every
/// parameter, for one fixed dropout realisation (or none).
pub fn loss_and_gradients(
    params: &ModelParams,
    g: &Graph,
    features: &DenseMatrix,
    targets: &[usize],
    masks: Option<&DropoutMasks>,
) -> Result<(f64, ModelParams)> {
    if !params.ends_in_softmax() {
        return Err(Error::arg("training requires a softmax output layer"));
    }
    if targets.is_empty() {
        return Err(Error::arg("no target nodes"));
    }
    let trace = forward_trace(params, g, features, masks)?;
    let logits = trace.outputs.last().expect("softmax layer present");
    let probs = trace.probabilities.as_ref().expect("softmax layer present");
    let labels = g.labels();
    let scale = 1.0 / targets.len() as f64;

    let mut loss = 0.0;
    let mut delta = DenseMatrix::zeros(probs.rows(), probs.cols());
    for &u in targets {
        let row = logits.row(u);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[u]];
        let d = delta.row_mut(u);
        for (c, (dc, &p)) in d.iter_mut().zip(probs.row(u)).enumerate() {
            // Duplicate targets accumulate, matching the loss sum.
            *dc += scale * (p - if c == labels[u] { 1.0 } else { 0.0 });
        }
    }
    loss *= scale;

    let mut grads = params.zeros_like();
    let n_embed = params.embed.len();
    // `delta` holds dL/d(pre-activation) of the current layer.
    for i in (0..params.mlp.len()).rev() {
        let layer = &params.mlp[i];
        let mask = masks.map(|m| m.mlp[i].as_slice());
        let input = trace.input(n_embed + i);
        let g_eff = weight_gradient(&delta, input)?;
        grads.mlp[i].weight = unmask(g_eff, mask)?;
        grads.mlp[i].bias = delta.column_sums();
        if n_embed + i == 0 {
            break;
        }
        let w = masked(&layer.weight, mask)?;
        let d_input = delta.matmul(&w)?;
        delta = through_activation(
            d_input,
            &trace.pre[n_embed + i - 1],
            activation_of(params, n_embed + i - 1),
        );
    }
    for i in (0..n_embed).rev() {
        let layer = &params.embed[i];
        let m = masks.map(|m| &m.embed[i]);
        let input = trace.input(i);
        let spread = mean_aggregate_transpose(g, &delta);
        grads.embed[i].combine = unmask(
            weight_gradient(&delta, input)?,
            m.map(|m| m.combine.as_slice()),
        )?;
        grads.embed[i].aggregate = unmask(
            weight_gradient(&spread, input)?,
            m.map(|m| m.aggregate.as_slice()),
        )?;
        if i == 0 {
            break;
        }
        let c = masked(&layer.combine, m.map(|m| m.combine.as_slice()))?;
        let a = masked(&layer.aggregate, m.map(|m| m.aggregate.as_slice()))?;
        let mut d_input = delta.matmul(&c)?;
        d_input.add_assign(&spread.matmul(&a)?)?;
        delta = through_activation(d_input, &trace.pre[i - 1], params.embed[i - 1].activation);
    }
    Ok((loss, grads))
}

fn activation_of(params: &ModelParams, layer: usize) -> Activation {
    if layer < params.embed.len() {
        params.embed[layer].activation
    } else {
        params.mlp[layer - params.embed.len()].activation
    }
}

fn through_activation(mut d: DenseMatrix, pre: &DenseMatrix, act: Activation) -> DenseMatrix {
    if act == Activation::Relu {
        for (x, &z) in d.data_mut().iter_mut().zip(pre.data()) {
            if z <= 0.0 {
                *x = 0.0;
            }
        }
    }
    d
}

/// `deltaᵀ · input` (out × in), evaluated in whichever order touches fewer
/// nonzeros.
fn weight_gradient(delta: &DenseMatrix, input: &DenseMatrix) -> Result<DenseMatrix> {
    let nnz = |m: &DenseMatrix| m.data().iter().filter(|&&x| x != 0.0).count();
    let by_delta = nnz(delta) * input.cols();
    let by_input = nnz(input) * delta.cols();
    if by_delta <= by_input {
        delta.t_matmul(input)
    } else {
        Ok(input.t_matmul(delta)?.transpose())
    }
}

fn unmask(grad: DenseMatrix, mask: Option<&[f64]>) -> Result<DenseMatrix> {
    match mask {
        Some(m) => grad.scale_columns(m),
        None => Ok(grad),
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (k, theta) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in theta.iter_mut().enumerate() {
                let g = grads[k][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochStats>,
}

/// Trains a freshly initialised network on the graph's train split.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(
        &cfg.architecture,
        g.feature_dim(),
        g.num_classes(),
        cfg.dropout_rate,
        cfg.seed,
    )?;
    train_from(g, cfg, params)
}

/// Continues training from the given parameters.
pub fn train_from(g: &Graph, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_nodes = g.splits().train.clone();
    if train_nodes.is_empty() {
        return Err(Error::arg("train split is empty"));
    }
    params.dropout_rate = cfg.dropout_rate;
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut shuffle_rng = RngStream::new(cfg.seed, streams::SHUFFLE);
    let mut dropout_rng = RngStream::new(cfg.seed, streams::TRAIN_DROPOUT);
    let mut order = train_nodes.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let masks = sample_dropout_mask(&params, &mut dropout_rng);
            let masks = (params.dropout_rate > 0.0).then_some(masks);
            let (loss, grads) =
                loss_and_gradients(&params, g, g.features(), batch, masks.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            adam.update(&mut params, &grads);
            loss_sum += loss;
            batches += 1;
        }
        let probs = full_forward(&params, g, g.features(), None)?;
        trace.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy: accuracy(&probs, g.labels(), &train_nodes),
            val_accuracy: accuracy(&probs, g.labels(), &g.splits().val),
        });
    }
    Ok(TrainOutcome { params, trace })
}
