//! GraphSAGE-style network: mean-aggregation embedding layers followed by
//! an MLP head with a softmax output.
//!
//! Each embedding layer computes, for every node `u`,
//!
//! ```text
//! h_u' = g( C · h_u + A · (1/|N(u)|) Σ_{v ∈ N(u)} p_uv h_v )
//! ```
//!
//! with no bias. Isolated nodes get a zero aggregate. Weight matrices are
//! stored as `(out × in)`; dropout masks act on their columns, i.e. on the
//! layer inputs, and carry inverted-dropout scaling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear | Activation::Softmax => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedLayer {
    pub combine: DenseMatrix,
    pub aggregate: DenseMatrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Layer widths. The default is two embedding layers of 64 and 32 units with
/// linear activations, then ReLU hidden layers of 12 and 8 units and a
/// softmax output with one unit per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed_dims: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub embed_activation: Activation,
    pub mlp_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embed_dims: vec![64, 32],
            mlp_hidden: vec![12, 8],
            embed_activation: Activation::Linear,
            mlp_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Vec<EmbedLayer>,
    pub mlp: Vec<DenseLayer>,
    pub dropout_rate: f64,
    pub seed: u64,
}

fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| (2.0 * rng.uniform() - 1.0) * limit)
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        arch: &Architecture,
        input_dim: usize,
        num_classes: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngStream::new(seed, crate::streams::INIT);
        let mut width = input_dim;
        let mut embed = Vec::new();
        for &out in &arch.embed_dims {
            embed.push(EmbedLayer {
                combine: glorot(out, width, &mut rng),
                aggregate: glorot(out, width, &mut rng),
                activation: arch.embed_activation,
            });
            width = out;
        }
        let mut mlp = Vec::new();
        let widths = arch
            .mlp_hidden
            .iter()
            .copied()
            .chain(std::iter::once(num_classes));
        let last = arch.mlp_hidden.len();
        for (i, out) in widths.enumerate() {
            mlp.push(DenseLayer {
                weight: glorot(out, width, &mut rng),
                bias: vec![0.0; out],
                activation: if i == last {
                    Activation::Softmax
                } else {
                    arch.mlp_activation
                },
            });
            width = out;
        }
        let params = Self {
            embed,
            mlp,
            dropout_rate,
            seed,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.embed.is_empty() && self.mlp.is_empty() {
            return Err(Error::arg("network has no layers"));
        }
        let mut width = self.input_dim();
        for (i, layer) in self.embed.iter().enumerate() {
            let (out, inp) = layer.combine.shape();
            if inp != width || layer.aggregate.shape() != (out, inp) {
                return Err(Error::shape(format!(
                    "embedding layer {i}: combine {:?}, aggregate {:?}, input width {width}",
                    layer.combine.shape(),
                    layer.aggregate.shape()
                )));
            }
            if layer.activation == Activation::Softmax {
                return Err(Error::arg("softmax is only valid on the output layer"));
            }
            width = out;
        }
        for (i, layer) in self.mlp.iter().enumerate() {
            let (out, inp) = layer.weight.shape();
            if inp != width || layer.bias.len() != out {
                return Err(Error::shape(format!(
                    "dense layer {i}: weight {:?}, bias {}, input width {width}",
                    layer.weight.shape(),
                    layer.bias.len()
                )));
            }
            if layer.activation == Activation::Softmax && i + 1 != self.mlp.len() {
                return Err(Error::arg("softmax is only valid on the output layer"));
            }
            width = out;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match (self.embed.first(), self.mlp.first()) {
            (Some(e), _) => e.combine.cols(),
            (None, Some(d)) => d.weight.cols(),
            (None, None) => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match (self.mlp.last(), self.embed.last()) {
            (Some(d), _) => d.weight.rows(),
            (None, Some(e)) => e.combine.rows(),
            (None, None) => 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.embed.len() + self.mlp.len()
    }

    pub fn ends_in_softmax(&self) -> bool {
        self.mlp
            .last()
            .is_some_and(|l| l.activation == Activation::Softmax)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat views of every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.embed {
            out.push(l.combine.data());
            out.push(l.aggregate.data());
        }
        for l in &self.mlp {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.embed {
            out.push(l.combine.data_mut());
            out.push(l.aggregate.data_mut());
        }
        for l in &mut self.mlp {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        out
    }

    /// Same structure with every weight and bias set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Writes the JSON checkpoint. Floats are written in shortest round-trip
    /// form, so reading it back reproduces every bit.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&Checkpoint::from(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.try_into()
    }
}

const CHECKPOINT_FORMAT: &str = "graphuq-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    seed: u64,
    dropout_rate: f64,
    embed: Vec<CheckpointEmbed>,
    mlp: Vec<CheckpointDense>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEmbed {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    combine: Vec<f64>,
    aggregate: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDense {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: p.seed,
            dropout_rate: p.dropout_rate,
            embed: p
                .embed
                .iter()
                .map(|l| CheckpointEmbed {
                    inputs: l.combine.cols(),
                    outputs: l.combine.rows(),
                    activation: l.activation,
                    combine: l.combine.data().to_vec(),
                    aggregate: l.aggregate.data().to_vec(),
                })
                .collect(),
            mlp: p
                .mlp
                .iter()
                .map(|l| CheckpointDense {
                    inputs: l.weight.cols(),
                    outputs: l.weight.rows(),
                    activation: l.activation,
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<Checkpoint> for ModelParams {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format {:?}",
                c.format
            )));
        }
        let embed = c
            .embed
            .into_iter()
            .map(|l| {
                Ok(EmbedLayer {
                    combine: DenseMatrix::new(l.outputs, l.inputs, l.combine)?,
                    aggregate: DenseMatrix::new(l.outputs, l.inputs, l.aggregate)?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mlp = c
            .mlp
            .into_iter()
            .map(|l| {
                Ok(DenseLayer {
                    weight: DenseMatrix::new(l.outputs, l.inputs, l.weight)?,
                    bias: l.bias,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams {
            embed,
            mlp,
            dropout_rate: c.dropout_rate,
            seed: c.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Column masks for one dropout realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedMask {
    pub combine: Vec<f64>,
    pub aggregate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub embed: Vec<EmbedMask>,
    pub mlp: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn ones(params: &ModelParams) -> Self {
        Self {
            embed: params
                .embed
                .iter()
                .map(|l| EmbedMask {
                    combine: vec![1.0; l.combine.cols()],
                    aggregate: vec![1.0; l.aggregate.cols()],
                })
                .collect(),
            mlp: params
                .mlp
                .iter()
                .map(|l| vec![1.0; l.weight.cols()])
                .collect(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.embed
            .iter()
            .flat_map(|m| m.combine.iter().chain(&m.aggregate))
            .chain(self.mlp.iter().flatten())
            .copied()
    }
}

/// Draws one mask per weight matrix: each entry is 0 with probability `φ`
/// and `1/(1-φ)` otherwise.
pub fn sample_dropout_mask(params: &ModelParams, rng: &mut RngStream) -> DropoutMasks {
    let phi = params.dropout_rate;
    let mut masks = DropoutMasks::ones(params);
    if phi == 0.0 {
        return masks;
    }
    let keep = 1.0 / (1.0 - phi);
    let mut draw = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = if rng.bernoulli(phi) { 0.0 } else { keep };
        }
    };
    for m in &mut masks.embed {
        draw(&mut m.combine);
        draw(&mut m.aggregate);
    }
    for m in &mut masks.mlp {
        draw(m);
    }
    masks
}

pub(crate) fn masked(w: &DenseMatrix, mask: Option<&[f64]>) -> Result<DenseMatrix> {
    match mask {
        Some(m) => w.scale_columns(m),
        None => Ok(w.clone()),
    }
}

/// `out_u = (Σ_v p_uv z_v) / |N(u)|`; zero for isolated nodes.
pub fn mean_aggregate(g: &Graph, z: &DenseMatrix) -> DenseMatrix {
    weighted_aggregate(g, z, |p| p, |deg| deg)
}

pub(crate) fn weighted_aggregate(
    g: &Graph,
    z: &DenseMatrix,
    link_weight: impl Fn(f64) -> f64,
    normaliser: impl Fn(f64) -> f64,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(z.rows(), z.cols());
    for u in 0..g.num_nodes() {
        let nbrs = g.neighbors(u);
        if nbrs.is_empty() {
            continue;
        }
        let dst = out.row_mut(u);
        for nb in nbrs {
            let w = link_weight(nb.prob);
            for (d, s) in dst.iter_mut().zip(z.row(nb.node)) {
                *d += w * s;
            }
        }
        let norm = normaliser(nbrs.len() as f64);
        for d in dst.iter_mut() {
            *d /= norm;
        }
    }
    out
}

/// Transpose of [`mean_aggregate`], used in backpropagation.
pub(crate) fn mean_aggregate_transpose(g: &Graph, d: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(d.rows(), d.cols());
    for u in 0..g.num_nodes() {
        let nbrs = g.neighbors(u);
        if nbrs.is_empty() {
            continue;
        }
        let deg = nbrs.len() as f64;
        let src = d.row(u).to_vec();
        if src.iter().all(|&x| x == 0.0) {
            continue;
        }
        for nb in nbrs {
            let w = nb.prob / deg;
            for (o, s) in out.row_mut(nb.node).iter_mut().zip(&src) {
                *o += w * s;
            }
        }
    }
    out
}

/// Pre-activation of one embedding layer for every node, given effective
/// (already masked) weights.
pub(crate) fn embed_preactivation(
    g: &Graph,
    h: &DenseMatrix,
    combine: &DenseMatrix,
    aggregate: &DenseMatrix,
) -> Result<DenseMatrix> {
    let mut pre = h.matmul_t(combine)?;
    let z = h.matmul_t(aggregate)?;
    pre.add_assign(&mean_aggregate(g, &z))?;
    Ok(pre)
}

pub(crate) fn dense_preactivation(
    h: &DenseMatrix,
    weight: &DenseMatrix,
    bias: &[f64],
) -> Result<DenseMatrix> {
    let mut pre = h.matmul_t(weight)?;
    pre.add_row_vector(bias)?;
    Ok(pre)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let s = softmax_row(logits.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Every intermediate of one deterministic pass. `outputs[i]` is layer `i`
/// after its activation, except that a softmax layer stores its logits there
/// and its probabilities in `probabilities`.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'a> {
    pub features: &'a DenseMatrix,
    pub pre: Vec<DenseMatrix>,
    pub outputs: Vec<DenseMatrix>,
    pub probabilities: Option<DenseMatrix>,
}

impl ForwardTrace<'_> {
    /// Input to layer `i`.
    pub fn input(&self, i: usize) -> &DenseMatrix {
        if i == 0 {
            self.features
        } else {
            &self.outputs[i - 1]
        }
    }

    /// Final network output: probabilities if the network ends in softmax.
    pub fn output(&self) -> &DenseMatrix {
        self.probabilities
            .as_ref()
            .unwrap_or_else(|| self.outputs.last().unwrap_or(self.features))
    }

    pub fn into_output(self) -> DenseMatrix {
        match self.probabilities {
            Some(p) => p,
            None => match self.outputs.into_iter().last() {
                Some(o) => o,
                None => self.features.clone(),
            },
        }
    }
}

fn check_features(params: &ModelParams, g: &Graph, features: &DenseMatrix) -> Result<()> {
    if features.rows() != g.num_nodes() || features.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "features {:?}, expected ({}, {})",
            features.shape(),
            g.num_nodes(),
            params.input_dim()
        )));
    }
    Ok(())
}

pub(crate) fn check_masks(params: &ModelParams, masks: Option<&DropoutMasks>) -> Result<()> {
    if let Some(m) = masks {
        if m.embed.len() != params.embed.len() || m.mlp.len() != params.mlp.len() {
            return Err(Error::shape("dropout mask layer count"));
        }
    }
    Ok(())
}

pub fn forward_trace<'a>(
    params: &ModelParams,
    g: &Graph,
    features: &'a DenseMatrix,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardTrace<'a>> {
    check_features(params, g, features)?;
    check_masks(params, masks)?;
    let mut trace = ForwardTrace {
        features,
        pre: Vec::with_capacity(params.num_layers()),
        outputs: Vec::with_capacity(params.num_layers()),
        probabilities: None,
    };
    for (i, layer) in params.embed.iter().enumerate() {
        let m = masks.map(|m| &m.embed[i]);
        let c = masked(&layer.combine, m.map(|m| m.combine.as_slice()))?;
        let a = masked(&layer.aggregate, m.map(|m| m.aggregate.as_slice()))?;
        let z = embed_preactivation(g, trace.input(i), &c, &a)?;
        trace.outputs.push(z.map(|x| layer.activation.apply(x)));
        trace.pre.push(z);
    }
    let offset = params.embed.len();
    for (i, layer) in params.mlp.iter().enumerate() {
        let w = masked(&layer.weight, masks.map(|m| m.mlp[i].as_slice()))?;
        let z = dense_preactivation(trace.input(offset + i), &w, &layer.bias)?;
        if layer.activation == Activation::Softmax {
            trace.probabilities = Some(softmax_rows(&z));
        }
        trace.outputs.push(z.map(|x| layer.activation.apply(x)));
        trace.pre.push(z);
    }
    Ok(trace)
}

/// Node embeddings after the last embedding layer.
pub fn embed_forward(
    params: &ModelParams,
    g: &Graph,
    features: &DenseMatrix,
    masks: Option<&DropoutMasks>,
) -> Result<DenseMatrix> {
    let embed_only = ModelParams {
        embed: params.embed.clone(),
        mlp: Vec::new(),
        dropout_rate: params.dropout_rate,
        seed: params.seed,
    };
    let masks = masks.map(|m| DropoutMasks {
        embed: m.embed.clone(),
        mlp: Vec::new(),
    });
    if embed_only.embed.is_empty() {
        return Ok(features.clone());
    }
    Ok(forward_trace(&embed_only, g, features, masks.as_ref())?.into_output())
}

/// Class-probability matrix (`n × C`).
pub fn full_forward(
    params: &ModelParams,
    g: &Graph,
    features: &DenseMatrix,
    masks: Option<&DropoutMasks>,
) -> Result<DenseMatrix> {
    Ok(forward_trace(params, g, features, masks)?.into_output())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `nodes` whose argmax prediction equals the label.
pub fn accuracy(probs: &DenseMatrix, labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&u| argmax(probs.row(u)) == labels[u])
        .count();
    hits as f64 / nodes.len() as f64
}
