use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use graphuq::adf::{relu_moments as adf_relu_moments, AdfOptions};
use graphuq::experiment::{sweep as run_sweep, ExperimentConfig};
use graphuq::graph::{
    derive_noise_variance, generate_synthetic, load_dataset, make_splits, save_dataset,
};
use graphuq::model::accuracy;
use graphuq::oracle::{self, CheckMode};
use graphuq::uq::{self, ReportSummary};
use graphuq::{
    streams, DatasetManifest, DenseMatrix, Error, ModelParams, RngStream, SyntheticSpec,
    TrainConfig,
};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Rows = Vec<Vec<f64>>;
/// `(epoch, train_loss, train_accuracy, val_accuracy)`
type TraceRow = (usize, f64, f64, f64);

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(py_err)
}

/// Graph with node features, labels, probabilistic links and splits.
#[pyclass(name = "Graph", module = "graphuq", frozen)]
struct PyGraph {
    inner: graphuq::Graph,
}

#[pymethods]
impl PyGraph {
    /// Planted-partition graph.
    #[staticmethod]
    #[pyo3(signature = (nodes, classes, intra_p, inter_p, feature_dim, seed=0, signal=3.0, offset=0.0, label_noise=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        nodes: usize,
        classes: usize,
        intra_p: f64,
        inter_p: f64,
        feature_dim: usize,
        seed: u64,
        signal: f64,
        offset: f64,
        label_noise: f64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            signal,
            offset,
            label_noise,
            ..SyntheticSpec::new(nodes, classes, intra_p, inter_p, feature_dim)
        };
        let mut rng = RngStream::new(seed, streams::SYNTHETIC);
        let inner = generate_synthetic(&spec, &mut rng).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Loads a dataset from its JSON manifest.
    #[staticmethod]
    fn load(manifest: &str) -> PyResult<Self> {
        let m = DatasetManifest::from_path(manifest).map_err(py_err)?;
        Ok(Self {
            inner: load_dataset(&m).map_err(py_err)?,
        })
    }

    /// Writes the dataset to `directory` and returns the manifest path.
    fn save(&self, directory: &str, name: &str) -> PyResult<String> {
        let p = save_dataset(&self.inner, directory, name).map_err(py_err)?;
        Ok(p.display().to_string())
    }

    /// Copy with a random train/validation/test split.
    #[pyo3(signature = (train=0.7, val=0.1, test=0.2, seed=0))]
    fn split(&self, train: f64, val: f64, test: f64, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, streams::SPLIT);
        let inner =
            make_splits(self.inner.clone(), (train, val, test), &mut rng).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_links(&self) -> usize {
        self.inner.num_links()
    }

    fn average_degree(&self) -> f64 {
        self.inner.average_degree()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.features())
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// `(train, val, test)` node indices.
    fn splits(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let s = self.inner.splits();
        (s.train.clone(), s.val.clone(), s.test.clone())
    }

    /// `(u, v, probability)` for every link.
    fn links(&self) -> Vec<(usize, usize, f64)> {
        self.inner.links()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, links={}, features={}, classes={})",
            self.inner.num_nodes(),
            self.inner.num_links(),
            self.inner.feature_dim(),
            self.inner.num_classes()
        )
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &ReportSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("noise_level_pct", s.noise_level_pct)?;
    d.set_item("mc_samples", s.mc_samples)?;
    d.set_item("test_nodes", s.test_nodes)?;
    d.set_item("accuracy", s.accuracy)?;
    d.set_item("prediction_loss", s.prediction_loss)?;
    d.set_item("avg_per_class_nll", s.avg_per_class_nll)?;
    d.set_item("mean_output_variance", s.mean_output_variance)?;
    d.set_item("mean_aleatoric", s.mean_aleatoric)?;
    d.set_item("mean_epistemic", s.mean_epistemic)?;
    d.set_item("mean_logit_variance", s.mean_logit_variance)?;
    Ok(d)
}

/// Trained network parameters.
#[pyclass(name = "Model", module = "graphuq", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Trains on the graph's train split. Returns the model and one
    /// `(epoch, train_loss, train_accuracy, val_accuracy)` tuple per epoch.
    #[staticmethod]
    #[pyo3(signature = (graph, epochs=50, batch_size=50, learning_rate=0.001, dropout_rate=0.1, seed=0))]
    fn train(
        graph: &PyGraph,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        dropout_rate: f64,
        seed: u64,
    ) -> PyResult<(Self, Vec<TraceRow>)> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            dropout_rate,
            seed,
            ..TrainConfig::default()
        };
        let out = graphuq::train(&graph.inner, &cfg).map_err(py_err)?;
        let trace = out
            .trace
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy))
            .collect();
        Ok((Self { inner: out.params }, trace))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn dropout_rate(&self) -> f64 {
        self.inner.dropout_rate
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Class probabilities from the deterministic forward pass.
    fn predict(&self, graph: &PyGraph) -> PyResult<Vec<Vec<f64>>> {
        let g = &graph.inner;
        let p = graphuq::full_forward(&self.inner, g, g.features(), None).map_err(py_err)?;
        Ok(to_rows(&p))
    }

    /// Deterministic test-split accuracy.
    fn accuracy(&self, graph: &PyGraph) -> PyResult<f64> {
        let g = &graph.inner;
        let p = graphuq::full_forward(&self.inner, g, g.features(), None).map_err(py_err)?;
        Ok(accuracy(&p, g.labels(), &g.splits().test))
    }

    /// Propagates per-node input moments through the network without
    /// dropout. Returns `(means, variances)` of the class probabilities.
    fn propagate(
        &self,
        graph: &PyGraph,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> PyResult<(Rows, Rows)> {
        let out = graphuq::adf_forward(
            &self.inner,
            &graph.inner,
            &from_rows(means)?,
            &from_rows(variances)?,
            None,
        )
        .map_err(py_err)?;
        Ok((to_rows(&out.mean), to_rows(&out.var)))
    }

    /// Noisy evaluation on the test split with MC dropout.
    #[pyo3(signature = (graph, noise_level_pct, mc_samples=100, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        graph: &PyGraph,
        noise_level_pct: f64,
        mc_samples: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let g = &graph.inner;
        let noise = derive_noise_variance(g, noise_level_pct).map_err(py_err)?;
        let report = uq::evaluate(&self.inner, g, &noise, mc_samples, seed).map_err(py_err)?;
        summary_dict(py, &report.summary)
    }
}

/// Mean and variance of `max(X, 0)` for `X ~ N(mu, var)`.
#[pyfunction]
fn relu_moments(mu: f64, var: f64) -> PyResult<(f64, f64)> {
    adf_relu_moments(mu, var).map_err(py_err)
}

/// Same quantity by numerical quadrature.
#[pyfunction]
fn relu_quadrature(mu: f64, var: f64) -> PyResult<(f64, f64)> {
    oracle::relu_quadrature(mu, var).map_err(py_err)
}

#[pyfunction]
fn nll_per_class(y: f64, y_hat: f64, total_variance: f64) -> PyResult<f64> {
    uq::nll_per_class(y, y_hat, total_variance).map_err(py_err)
}

#[pyfunction]
fn std_normal_cdf(x: f64) -> f64 {
    graphuq::linalg::std_normal_cdf(x)
}

/// Runs the sampling check on a named fixture. Returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (fixture="linear2", samples=100_000, seed=0, end_to_end=false, rel_var=None))]
fn oracle_check(
    fixture: &str,
    samples: usize,
    seed: u64,
    end_to_end: bool,
    rel_var: Option<f64>,
) -> PyResult<(bool, String)> {
    let f = match fixture {
        "path3" => oracle::path3_fixture(),
        "linear2" => oracle::linear2_fixture(),
        "relu-mlp" => oracle::relu_mlp_fixture(),
        other => return Err(PyValueError::new_err(format!("unknown fixture {other:?}"))),
    };
    let mode = if end_to_end {
        CheckMode::EndToEnd
    } else {
        CheckMode::LayerWise
    };
    let r = oracle::oracle_check(&f, samples, seed, mode, rel_var, AdfOptions::default())
        .map_err(py_err)?;
    Ok((r.passed(), r.render()))
}

/// Runs a noise sweep from a JSON experiment config and returns one dict per
/// noise level.
#[pyfunction]
fn sweep<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: ExperimentConfig = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let table = run_sweep(&cfg, None).map_err(py_err)?;
    table
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("noise_level_pct", r.noise_level_pct)?;
            d.set_item("accuracy", r.accuracy)?;
            d.set_item("prediction_loss", r.prediction_loss)?;
            d.set_item("avg_per_class_nll", r.avg_per_class_nll)?;
            d.set_item("mean_output_variance", r.mean_output_variance)?;
            d.set_item("repeats", r.repeats)?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "graphuq")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(relu_moments, m)?)?;
    m.add_function(wrap_pyfunction!(relu_quadrature, m)?)?;
    m.add_function(wrap_pyfunction!(nll_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(std_normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
