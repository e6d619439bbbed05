//! Epistemic uncertainty from MC dropout, fusion with the ADF (aleatoric)
//! variance, and the evaluation metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adf::{adf_forward, AdfOutput, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::graph::{inject_feature_noise, Graph, NoiseSpec};
use crate::linalg::{DenseMatrix, RngStream};
use crate::model::{argmax, sample_dropout_mask, ModelParams};
use crate::streams;

/// `M` ADF passes, one per dropout mask.
#[derive(Debug, Clone, PartialEq)]
pub struct McEnsemble {
    pub seed: u64,
    pub means: Vec<DenseMatrix>,
    pub variances: Vec<DenseMatrix>,
    /// Pre-softmax variances, kept for reporting.
    pub logit_variances: Vec<DenseMatrix>,
}

impl McEnsemble {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn push(&mut self, out: AdfOutput) {
        self.means.push(out.mean);
        self.variances.push(out.var);
        self.logit_variances.push(out.logits.var);
    }
}

/// Runs `m` ADF passes; sample `t` uses the dropout mask drawn from stream
/// `(seed, MC_BASE + t)`, so any sample can be reproduced on its own.
pub fn run_mc_ensemble(
    params: &ModelParams,
    g: &Graph,
    input_means: &DenseMatrix,
    input_variances: &DenseMatrix,
    m: usize,
    seed: u64,
) -> Result<McEnsemble> {
    if m == 0 {
        return Err(Error::arg("MC sample count must be at least 1"));
    }
    let mut ens = McEnsemble {
        seed,
        means: Vec::with_capacity(m),
        variances: Vec::with_capacity(m),
        logit_variances: Vec::with_capacity(m),
    };
    if params.dropout_rate == 0.0 {
        let out = adf_forward(params, g, input_means, input_variances, None)?;
        for _ in 1..m {
            ens.push(out.clone());
        }
        ens.push(out);
        return Ok(ens);
    }
    for t in 0..m as u64 {
        let mut rng = RngStream::new(seed, streams::MC_BASE + t);
        let mask = sample_dropout_mask(params, &mut rng);
        ens.push(adf_forward(
            params,
            g,
            input_means,
            input_variances,
            Some(&mask),
        )?);
    }
    Ok(ens)
}

/// Ensemble statistics per node and class.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecomposition {
    /// Mean prediction `ŷ = (1/M) Σ μ_t`.
    pub mean: DenseMatrix,
    /// `(1/M) Σ v_t`.
    pub aleatoric: DenseMatrix,
    /// `(1/M) Σ (μ_t − ŷ)²`.
    pub epistemic: DenseMatrix,
    pub total: DenseMatrix,
}

pub fn total_variance(ens: &McEnsemble) -> Result<VarianceDecomposition> {
    let first = ens
        .means
        .first()
        .ok_or_else(|| Error::arg("empty ensemble"))?;
    let (n, c) = first.shape();
    let inv = 1.0 / ens.len() as f64;
    // Deviations from the first sample: identical samples give an exactly
    // zero spread.
    let mut shift = DenseMatrix::zeros(n, c);
    let mut aleatoric = DenseMatrix::zeros(n, c);
    for (mu, v) in ens.means.iter().zip(&ens.variances) {
        if mu.shape() != (n, c) || v.shape() != (n, c) {
            return Err(Error::shape("ensemble members disagree in shape"));
        }
        for ((s, &a), &b) in shift.data_mut().iter_mut().zip(mu.data()).zip(first.data()) {
            *s += a - b;
        }
        aleatoric.add_assign(v)?;
    }
    let shift = shift.map(|x| x * inv);
    let aleatoric = aleatoric.map(|x| x * inv);
    let mut epistemic = DenseMatrix::zeros(n, c);
    for mu in &ens.means {
        for (((e, &a), &b), &s) in epistemic
            .data_mut()
            .iter_mut()
            .zip(mu.data())
            .zip(first.data())
            .zip(shift.data())
        {
            let d = (a - b) - s;
            *e += d * d;
        }
    }
    let epistemic = epistemic.map(|x| x * inv);
    let mut mean = first.clone();
    mean.add_assign(&shift)?;
    let mut total = aleatoric.clone();
    total.add_assign(&epistemic)?;
    Ok(VarianceDecomposition {
        mean,
        aleatoric,
        epistemic,
        total,
    })
}

/// Gaussian negative log likelihood of a 0/1 class indicator,
/// `½ ln σ + (y − ŷ)² / (2σ)`, with `σ` floored at [`VARIANCE_FLOOR`].
pub fn nll_per_class(y: f64, y_hat: f64, sigma_tot: f64) -> Result<f64> {
    if !(y.is_finite() && y_hat.is_finite() && sigma_tot.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite nll input y={y} y_hat={y_hat} variance={sigma_tot}"
        )));
    }
    let sigma = sigma_tot.max(VARIANCE_FLOOR);
    let r = y - y_hat;
    Ok(0.5 * sigma.ln() + r * r / (2.0 * sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub true_label: usize,
    pub pred_label: usize,
    pub p_true: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub noise_level_pct: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub test_nodes: usize,
    pub accuracy: f64,
    pub prediction_loss: f64,
    /// Absent when every test-node total variance is exactly zero.
    pub avg_per_class_nll: Option<f64>,
    pub mean_output_variance: f64,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    pub mean_logit_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqReport {
    pub summary: ReportSummary,
    pub decomposition: VarianceDecomposition,
    pub predicted: Vec<usize>,
    /// One record per test node, classwise quantities averaged over classes.
    pub nodes: Vec<NodeRecord>,
}

impl UqReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.summary)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn write_node_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path.as_ref(), &self.nodes)
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

fn mean_of(m: &DenseMatrix, nodes: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &u in nodes {
        sum += m.row(u).iter().sum::<f64>();
    }
    sum / (nodes.len() * m.cols()).max(1) as f64
}

/// Builds the report for the test split from a finished ensemble.
pub fn summarize(g: &Graph, ens: &McEnsemble, noise_level_pct: f64) -> Result<UqReport> {
    let test = &g.splits().test;
    if test.is_empty() {
        return Err(Error::arg("test split is empty"));
    }
    let dec = total_variance(ens)?;
    let labels = g.labels();
    let classes = dec.mean.cols();
    let predicted: Vec<usize> = (0..dec.mean.rows())
        .map(|u| argmax(dec.mean.row(u)))
        .collect();

    let mut hits = 0usize;
    let mut loss = 0.0;
    for &u in test {
        if predicted[u] == labels[u] {
            hits += 1;
        }
        loss -= dec.mean[(u, labels[u])].max(1e-15).ln();
    }

    let degenerate = test
        .iter()
        .all(|&u| dec.total.row(u).iter().all(|&s| s == 0.0));
    let avg_nll = if degenerate {
        None
    } else {
        let mut per_class = vec![0.0; classes];
        for (c, acc) in per_class.iter_mut().enumerate() {
            for &u in test {
                let y = if labels[u] == c { 1.0 } else { 0.0 };
                *acc += nll_per_class(y, dec.mean[(u, c)], dec.total[(u, c)])?;
            }
            *acc /= test.len() as f64;
        }
        Some(per_class.iter().sum::<f64>() / classes as f64)
    };

    let mut logit_var = 0.0;
    for lv in &ens.logit_variances {
        logit_var += mean_of(lv, test);
    }
    logit_var /= ens.len() as f64;

    let row_mean = |m: &DenseMatrix, u: usize| m.row(u).iter().sum::<f64>() / classes as f64;
    let nodes = test
        .iter()
        .map(|&u| NodeRecord {
            node_id: g.node_ids()[u].clone(),
            true_label: labels[u],
            pred_label: predicted[u],
            p_true: dec.mean[(u, labels[u])],
            aleatoric: row_mean(&dec.aleatoric, u),
            epistemic: row_mean(&dec.epistemic, u),
            total: row_mean(&dec.total, u),
        })
        .collect();

    let summary = ReportSummary {
        noise_level_pct,
        mc_samples: ens.len(),
        seed: ens.seed,
        test_nodes: test.len(),
        accuracy: hits as f64 / test.len() as f64,
        prediction_loss: loss / test.len() as f64,
        avg_per_class_nll: avg_nll,
        mean_output_variance: mean_of(&dec.total, test),
        mean_aleatoric: mean_of(&dec.aleatoric, test),
        mean_epistemic: mean_of(&dec.epistemic, test),
        mean_logit_variance: logit_var,
    };
    Ok(UqReport {
        summary,
        decomposition: dec,
        predicted,
        nodes,
    })
}

/// Corrupts the features with `noise`, runs the MC-dropout ADF ensemble on
/// the noisy features with the noise variance as input variance, and scores
/// the test split.
pub fn evaluate(
    params: &ModelParams,
    g: &Graph,
    noise: &NoiseSpec,
    m: usize,
    seed: u64,
) -> Result<UqReport> {
    if g.splits().test.is_empty() {
        return Err(Error::arg("test split is empty"));
    }
    let mut rng = RngStream::new(seed, streams::NOISE);
    let noisy = inject_feature_noise(g.features(), noise, &mut rng)?;
    let variances = noise.variance_matrix(g.num_nodes());
    let ens = run_mc_ensemble(params, g, &noisy, &variances, m, seed)?;
    summarize(g, &ens, noise.level_pct)
}
