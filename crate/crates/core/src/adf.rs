//! Assumed density filtering: every activation is carried as an independent
//! Gaussian `(mean, variance)` pair and each layer maps those moments to the
//! moments of its output.
//!
//! * embedding layer (linear): `μ' = C μ_u + A · mean_v(p_uv μ_v)` and
//!   `v' = C² v_u + A² · Σ_v p_uv² v_v / (|N(u)| · D(u))` with `D(u) = |N(u)|`
//! * dense layer: `μ' = W μ + b`, `v' = W² v` (elementwise square)
//! * ReLU: closed-form moments of a rectified Gaussian
//! * softmax: first-order delta method on the logits
//!
//! Cross-covariances are dropped after every layer. The mean path shares its
//! arithmetic with [`crate::model::full_forward`], so a zero-variance input
//! reproduces the deterministic pass bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{std_normal_cdf, std_normal_pdf, DenseMatrix};
use crate::model::{
    check_masks, dense_preactivation, embed_preactivation, masked, softmax_row, weighted_aggregate,
    Activation, DropoutMasks, EmbedMask, ModelParams,
};

/// Variances below this are treated as zero by the ReLU rule.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-node Gaussian moments of one layer: row `u` holds node `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    pub mean: DenseMatrix,
    pub var: DenseMatrix,
}

impl MomentMatrix {
    pub fn new(mean: DenseMatrix, var: DenseMatrix) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::shape(format!(
                "mean {:?} and variance {:?}",
                mean.shape(),
                var.shape()
            )));
        }
        check_nonnegative(&var)?;
        Ok(Self { mean, var })
    }

    pub fn deterministic(mean: DenseMatrix) -> Self {
        let var = DenseMatrix::zeros(mean.rows(), mean.cols());
        Self { mean, var }
    }
}

fn check_nonnegative(var: &DenseMatrix) -> Result<()> {
    match var.data().iter().find(|&&v| !(v >= 0.0)) {
        Some(v) => Err(Error::arg(format!("negative or NaN variance {v}"))),
        None => Ok(()),
    }
}

/// Knobs for the oracle comparison tooling. The default is the correct rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdfOptions {
    /// Drops the `D(u)` factor from the aggregated variance. Only exists so
    /// the oracle check has a known-bad rule to reject.
    #[serde(default)]
    pub corrupt_aggregate_variance: bool,
}

/// Moments after one linear embedding layer (before any activation).
pub fn adf_embed_layer(
    prev: &MomentMatrix,
    g: &Graph,
    combine: &DenseMatrix,
    aggregate: &DenseMatrix,
    mask: Option<&EmbedMask>,
) -> Result<MomentMatrix> {
    adf_embed_layer_with(prev, g, combine, aggregate, mask, AdfOptions::default())
}

pub fn adf_embed_layer_with(
    prev: &MomentMatrix,
    g: &Graph,
    combine: &DenseMatrix,
    aggregate: &DenseMatrix,
    mask: Option<&EmbedMask>,
    opts: AdfOptions,
) -> Result<MomentMatrix> {
    check_nonnegative(&prev.var)?;
    if prev.mean.rows() != g.num_nodes() {
        return Err(Error::shape(format!(
            "{} moment rows for {} nodes",
            prev.mean.rows(),
            g.num_nodes()
        )));
    }
    let c = masked(combine, mask.map(|m| m.combine.as_slice()))?;
    let a = masked(aggregate, mask.map(|m| m.aggregate.as_slice()))?;
    let mean = embed_preactivation(g, &prev.mean, &c, &a)?;

    let mut var = prev.var.matmul_t(&c.squared())?;
    let z = prev.var.matmul_t(&a.squared())?;
    let spread = if opts.corrupt_aggregate_variance {
        weighted_aggregate(g, &z, |p| p * p, |deg| deg)
    } else {
        weighted_aggregate(g, &z, |p| p * p, |deg| deg * deg)
    };
    var.add_assign(&spread)?;
    Ok(MomentMatrix { mean, var })
}

/// Moments after `W x + b`.
pub fn adf_affine(
    input: &MomentMatrix,
    weight: &DenseMatrix,
    bias: &[f64],
    mask: Option<&[f64]>,
) -> Result<MomentMatrix> {
    check_nonnegative(&input.var)?;
    let w = masked(weight, mask)?;
    let mean = dense_preactivation(&input.mean, &w, bias)?;
    let var = input.var.matmul_t(&w.squared())?;
    Ok(MomentMatrix { mean, var })
}

/// Mean and variance of `max(X, 0)` for `X ~ N(mu, v)`.
pub fn relu_moments(mu: f64, v: f64) -> Result<(f64, f64)> {
    if !(v >= 0.0) {
        return Err(Error::arg(format!("negative variance {v}")));
    }
    if v < VARIANCE_FLOOR {
        return Ok((mu.max(0.0), 0.0));
    }
    let sigma = v.sqrt();
    let t = mu / sigma;
    let cdf = std_normal_cdf(t);
    let pdf = std_normal_pdf(t);
    let mean = mu * cdf + sigma * pdf;
    let second = (mu * mu + v) * cdf + mu * sigma * pdf;
    Ok((mean, (second - mean * mean).max(0.0)))
}

fn relu_layer(m: MomentMatrix) -> Result<MomentMatrix> {
    let mut mean = m.mean;
    let mut var = m.var;
    for (mu, v) in mean.data_mut().iter_mut().zip(var.data_mut()) {
        let (a, b) = relu_moments(*mu, *v)?;
        *mu = a;
        *v = b;
    }
    Ok(MomentMatrix { mean, var })
}

fn activate(m: MomentMatrix, act: Activation) -> Result<MomentMatrix> {
    match act {
        Activation::Relu => relu_layer(m),
        Activation::Linear | Activation::Softmax => Ok(m),
    }
}

/// Class-probability moments from logit moments: `s = softmax(μ)` and
/// `var_c = Σ_j J_cj² v_j` with `J = diag(s) - s sᵀ`.
pub fn softmax_moments(mu: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if mu.len() != v.len() {
        return Err(Error::shape("logit mean and variance lengths differ"));
    }
    if let Some(bad) = v.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::arg(format!("negative logit variance {bad}")));
    }
    let s = softmax_row(mu);
    let var = (0..s.len())
        .map(|c| {
            s.iter()
                .zip(v)
                .enumerate()
                .map(|(j, (&sj, &vj))| {
                    let jac = if c == j {
                        s[c] * (1.0 - sj)
                    } else {
                        -s[c] * sj
                    };
                    jac * jac * vj
                })
                .sum()
        })
        .collect();
    Ok((s, var))
}

/// Output of a full ADF pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AdfOutput {
    /// Class-probability means (`n × C`); logits if the network has no
    /// softmax layer.
    pub mean: DenseMatrix,
    pub var: DenseMatrix,
    /// Pre-softmax moments of the output layer.
    pub logits: MomentMatrix,
}

/// Moments after every layer: entry `i` is layer `i` after its activation,
/// with the softmax layer reported as logits.
pub fn adf_trace(
    params: &ModelParams,
    g: &Graph,
    input: &MomentMatrix,
    masks: Option<&DropoutMasks>,
    opts: AdfOptions,
) -> Result<Vec<MomentMatrix>> {
    check_masks(params, masks)?;
    if input.mean.rows() != g.num_nodes() || input.mean.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "input moments {:?}, expected ({}, {})",
            input.mean.shape(),
            g.num_nodes(),
            params.input_dim()
        )));
    }
    check_nonnegative(&input.var)?;
    let mut layers: Vec<MomentMatrix> = Vec::with_capacity(params.num_layers());
    for (i, layer) in params.embed.iter().enumerate() {
        let prev = layers.last().unwrap_or(input);
        let m = adf_embed_layer_with(
            prev,
            g,
            &layer.combine,
            &layer.aggregate,
            masks.map(|m| &m.embed[i]),
            opts,
        )?;
        layers.push(activate(m, layer.activation)?);
    }
    for (i, layer) in params.mlp.iter().enumerate() {
        let prev = layers.last().unwrap_or(input);
        let m = adf_affine(
            prev,
            &layer.weight,
            &layer.bias,
            masks.map(|m| m.mlp[i].as_slice()),
        )?;
        layers.push(activate(m, layer.activation)?);
    }
    Ok(layers)
}

pub fn adf_forward(
    params: &ModelParams,
    g: &Graph,
    input_means: &DenseMatrix,
    input_variances: &DenseMatrix,
    masks: Option<&DropoutMasks>,
) -> Result<AdfOutput> {
    adf_forward_with(
        params,
        g,
        input_means,
        input_variances,
        masks,
        AdfOptions::default(),
    )
}

pub fn adf_forward_with(
    params: &ModelParams,
    g: &Graph,
    input_means: &DenseMatrix,
    input_variances: &DenseMatrix,
    masks: Option<&DropoutMasks>,
    opts: AdfOptions,
) -> Result<AdfOutput> {
    let input = MomentMatrix::new(input_means.clone(), input_variances.clone())?;
    let logits = adf_trace(params, g, &input, masks, opts)?
        .pop()
        .expect("validated network has layers");
    if !params.ends_in_softmax() {
        return Ok(AdfOutput {
            mean: logits.mean.clone(),
            var: logits.var.clone(),
            logits,
        });
    }
    let (n, c) = logits.mean.shape();
    let mut mean = DenseMatrix::zeros(n, c);
    let mut var = DenseMatrix::zeros(n, c);
    for u in 0..n {
        let (s, sv) = softmax_moments(logits.mean.row(u), logits.var.row(u))?;
        mean.row_mut(u).copy_from_slice(&s);
        var.row_mut(u).copy_from_slice(&sv);
    }
    Ok(AdfOutput { mean, var, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path3() -> Graph {
        let features = DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        Graph::new(
            vec!["0".into(), "1".into(), "2".into()],
            features,
            vec![0, 0, 0],
            1,
            &[(0, 1, 1.0), (1, 2, 0.5)],
            false,
        )
        .unwrap()
    }

    fn scalar(x: f64) -> DenseMatrix {
        DenseMatrix::filled(1, 1, x)
    }

    #[test]
    fn embed_layer_hand_example() {
        let g = path3();
        let prev = MomentMatrix::new(
            g.features().clone(),
            DenseMatrix::from_rows(&[vec![0.04], vec![0.09], vec![0.16]]).unwrap(),
        )
        .unwrap();
        let out = adf_embed_layer(&prev, &g, &scalar(1.0), &scalar(1.0), None).unwrap();
        assert_abs_diff_eq!(out.mean[(1, 0)], 3.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.var[(1, 0)], 0.11, epsilon = 1e-15);
    }

    #[test]
    fn zero_variance_stays_zero() {
        let g = path3();
        let prev = MomentMatrix::deterministic(g.features().clone());
        let out = adf_embed_layer(&prev, &g, &scalar(0.7), &scalar(-1.3), None).unwrap();
        assert!(out.var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_neighbor_pass_through() {
        let g = Graph::new(
            vec!["a".into(), "b".into()],
            DenseMatrix::from_rows(&[vec![3.0], vec![-2.0]]).unwrap(),
            vec![0, 0],
            1,
            &[(0, 1, 1.0)],
            false,
        )
        .unwrap();
        let prev = MomentMatrix::new(
            g.features().clone(),
            DenseMatrix::from_rows(&[vec![0.5], vec![0.25]]).unwrap(),
        )
        .unwrap();
        let out = adf_embed_layer(&prev, &g, &scalar(0.0), &scalar(1.0), None).unwrap();
        assert_eq!(out.mean[(0, 0)], -2.0);
        assert_eq!(out.var[(0, 0)], 0.25);
    }

    #[test]
    fn negative_input_variance_is_rejected() {
        let g = path3();
        let prev = MomentMatrix {
            mean: g.features().clone(),
            var: DenseMatrix::filled(3, 1, -0.1),
        };
        assert!(adf_embed_layer(&prev, &g, &scalar(1.0), &scalar(1.0), None).is_err());
    }

    #[test]
    fn affine_examples() {
        let m = MomentMatrix::new(
            DenseMatrix::from_rows(&[vec![1.0, -2.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.3, 0.7]]).unwrap(),
        )
        .unwrap();
        let same = adf_affine(&m, &DenseMatrix::identity(2), &[0.0, 0.0], None).unwrap();
        assert_eq!(same, m);

        let one = MomentMatrix::new(scalar(1.0), scalar(0.5)).unwrap();
        let out = adf_affine(&one, &scalar(3.0), &[0.0], None).unwrap();
        assert_eq!(out.var[(0, 0)], 4.5);
        assert!(adf_affine(&one, &DenseMatrix::identity(2), &[0.0, 0.0], None).is_err());
    }

    #[test]
    fn relu_limits() {
        let (m, v) = relu_moments(10.0, 1e-12).unwrap();
        assert_abs_diff_eq!(m, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        let (m, v) = relu_moments(-10.0, 1e-12).unwrap();
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        assert_eq!(relu_moments(2.0, 0.0).unwrap(), (2.0, 0.0));
        assert!(relu_moments(0.0, -1.0).is_err());
    }

    #[test]
    fn relu_standard_normal() {
        // E[max(X,0)] = 1/√(2π), Var = 1/2 − 1/(2π)
        let (m, v) = relu_moments(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(m, 0.39894, epsilon = 1e-4);
        assert_abs_diff_eq!(v, 0.34085, epsilon = 1e-4);
    }

    #[test]
    fn softmax_two_class_hand_jacobian() {
        let (s, v) = softmax_moments(&[0.3, 0.3], &[0.04, 0.04]).unwrap();
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[0], 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.005, epsilon = 1e-15);
        let (_, v) = softmax_moments(&[1.0, -2.0, 0.5], &[0.0; 3]).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(softmax_moments(&[0.0], &[-1.0]).is_err());
    }
}
