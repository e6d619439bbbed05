//! Graph data model with probabilistic links and noisy node features.
//!
//! Datasets are read from a JSON manifest pointing at two CSV files:
//!
//! * nodes: `node_id,label,f0,f1,...,f{d-1}` with a header row
//! * edges: `src,dst[,prob]` with a header row; `prob` defaults to 1.0
//!
//! Undirected graphs store every link once per direction so that
//! aggregation can iterate a node's neighbours directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sample_gaussian, DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: usize,
    pub prob: f64,
}

/// Disjoint train/validation/test node index sets, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_ids: Vec<String>,
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    adjacency: Vec<Vec<Neighbor>>,
    directed: bool,
    splits: Splits,
}

impl Graph {
    /// Builds a graph from `(src, dst, prob)` triples over node indices.
    ///
    /// For undirected graphs a triple may be listed in one or both
    /// directions; listing both with different probabilities is an error.
    pub fn new(
        node_ids: Vec<String>,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize, f64)],
        directed: bool,
    ) -> Result<Self> {
        let n = features.rows();
        if node_ids.len() != n || labels.len() != n {
            return Err(Error::shape(format!(
                "{} node ids and {} labels for {n} feature rows",
                node_ids.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let mut adjacency: Vec<Vec<Neighbor>> = vec![Vec::new(); n];
        for &(src, dst, prob) in edges {
            if src >= n || dst >= n {
                return Err(Error::Validation(format!(
                    "edge ({src}, {dst}) references a node outside [0, {n})"
                )));
            }
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Validation(format!(
                    "link probability {prob} on edge ({src}, {dst}) outside [0, 1]"
                )));
            }
            if src == dst {
                return Err(Error::Validation(format!("self-loop on node {src}")));
            }
            insert_link(&mut adjacency, src, dst, prob, directed)?;
            if !directed {
                insert_link(&mut adjacency, dst, src, prob, directed)?;
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|nb| nb.node);
        }
        Ok(Self {
            node_ids,
            features,
            labels,
            num_classes,
            adjacency,
            directed,
            splits: Splits::default(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn neighbors(&self, u: usize) -> &[Neighbor] {
        &self.adjacency[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    /// Number of links: undirected links are counted once.
    pub fn num_links(&self) -> usize {
        let entries: usize = self.adjacency.iter().map(Vec::len).sum();
        if self.directed {
            entries
        } else {
            entries / 2
        }
    }

    pub fn average_degree(&self) -> f64 {
        let entries: usize = self.adjacency.iter().map(Vec::len).sum();
        entries as f64 / self.num_nodes().max(1) as f64
    }

    /// Every link as `(src, dst, prob)`, undirected links once with `src < dst`.
    pub fn links(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (u, list) in self.adjacency.iter().enumerate() {
            for nb in list {
                if self.directed || u < nb.node {
                    out.push((u, nb.node, nb.prob));
                }
            }
        }
        out
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        validate_splits(&splits, self.num_nodes())?;
        self.splits = splits;
        Ok(self)
    }

    /// Same topology and labels with every link probability replaced.
    pub fn map_link_probs(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let links: Vec<_> = self
            .links()
            .into_iter()
            .map(|(u, v, p)| (u, v, f(u, v, p)))
            .collect();
        let g = Graph::new(
            self.node_ids.clone(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            &links,
            self.directed,
        )?;
        g.with_splits(self.splits.clone())
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::shape("permutation length"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::arg("not a permutation"));
            }
        }
        let mut ids = vec![String::new(); n];
        let mut labels = vec![0; n];
        let mut features = DenseMatrix::zeros(n, self.feature_dim());
        for i in 0..n {
            ids[perm[i]] = self.node_ids[i].clone();
            labels[perm[i]] = self.labels[i];
            features
                .row_mut(perm[i])
                .copy_from_slice(self.features.row(i));
        }
        let links: Vec<_> = self
            .links()
            .into_iter()
            .map(|(u, v, p)| (perm[u], perm[v], p))
            .collect();
        let remap = |s: &[usize]| {
            let mut v: Vec<usize> = s.iter().map(|&i| perm[i]).collect();
            v.sort_unstable();
            v
        };
        let splits = Splits {
            train: remap(&self.splits.train),
            val: remap(&self.splits.val),
            test: remap(&self.splits.test),
        };
        Graph::new(
            ids,
            features,
            labels,
            self.num_classes,
            &links,
            self.directed,
        )?
        .with_splits(splits)
    }
}

fn insert_link(
    adjacency: &mut [Vec<Neighbor>],
    src: usize,
    dst: usize,
    prob: f64,
    directed: bool,
) -> Result<()> {
    if let Some(existing) = adjacency[src].iter().find(|nb| nb.node == dst) {
        if directed {
            return Err(Error::Validation(format!(
                "duplicate directed edge ({src}, {dst})"
            )));
        }
        if existing.prob != prob {
            return Err(Error::Validation(format!(
                "asymmetric undirected edge ({src}, {dst}): probabilities {} and {prob}",
                existing.prob
            )));
        }
        return Ok(());
    }
    adjacency[src].push(Neighbor { node: dst, prob });
    Ok(())
}

fn validate_splits(splits: &Splits, n: usize) -> Result<()> {
    let mut owner = vec![false; n];
    for set in [&splits.train, &splits.val, &splits.test] {
        for &i in set {
            if i >= n {
                return Err(Error::Validation(format!("split index {i} >= {n}")));
            }
            if std::mem::replace(&mut owner[i], true) {
                return Err(Error::Validation(format!("node {i} in two splits")));
            }
        }
    }
    Ok(())
}

/// JSON manifest describing an on-disk dataset. Relative file paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub nodes_file: PathBuf,
    pub edges_file: PathBuf,
    pub feature_dim: usize,
    pub class_count: usize,
    pub directed: bool,
}

impl DatasetManifest {
    /// Reads a manifest and rebases its file paths on the manifest's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.nodes_file = base.join(&manifest.nodes_file);
        manifest.edges_file = base.join(&manifest.edges_file);
        Ok(manifest)
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Graph> {
    let nodes_path = manifest.nodes_file.as_path();
    let d = manifest.feature_dim;
    let mut reader = csv_reader(nodes_path)?;
    let header_len = reader
        .headers()
        .map_err(|e| csv_error(nodes_path, e))?
        .len();
    if header_len != d + 2 {
        return Err(parse_err(
            nodes_path,
            1,
            format!(
                "header has {header_len} columns, expected {} (node_id,label,f0..f{})",
                d + 2,
                d.saturating_sub(1)
            ),
        ));
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(nodes_path, e))?;
        let line = record_line(&record);
        if record.len() != d + 2 {
            return Err(parse_err(
                nodes_path,
                line,
                format!("{} columns, expected {}", record.len(), d + 2),
            ));
        }
        let id = record[0].to_string();
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(parse_err(
                nodes_path,
                line,
                format!("duplicate node id {id}"),
            ));
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| parse_err(nodes_path, line, format!("bad label {:?}", &record[1])))?;
        if label >= manifest.class_count {
            return Err(parse_err(
                nodes_path,
                line,
                format!("label {label} outside [0, {})", manifest.class_count),
            ));
        }
        for field in record.iter().skip(2) {
            let x: f64 = field
                .parse()
                .map_err(|_| parse_err(nodes_path, line, format!("bad feature {field:?}")))?;
            if !x.is_finite() {
                return Err(parse_err(nodes_path, line, "non-finite feature"));
            }
            data.push(x);
        }
        ids.push(id);
        labels.push(label);
    }
    let features = DenseMatrix::new(ids.len(), d, data)?;

    let edges_path = manifest.edges_file.as_path();
    let mut reader = csv_reader(edges_path)?;
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(edges_path, e))?;
        let line = record_line(&record);
        if record.len() != 2 && record.len() != 3 {
            return Err(parse_err(edges_path, line, "expected src,dst[,prob]"));
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| parse_err(edges_path, line, format!("unknown node id {s:?}")))
        };
        let (src, dst) = (lookup(&record[0])?, lookup(&record[1])?);
        let prob = match record.get(2) {
            Some(s) if !s.is_empty() => s
                .parse::<f64>()
                .map_err(|_| parse_err(edges_path, line, format!("bad probability {s:?}")))?,
            _ => 1.0,
        };
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Validation(format!(
                "{}:{line}: link probability {prob} outside [0, 1]",
                edges_path.display()
            )));
        }
        if src == dst {
            return Err(Error::Validation(format!(
                "{}:{line}: self-loop on node {}",
                edges_path.display(),
                &record[0]
            )));
        }
        edges.push((src, dst, prob));
    }
    Graph::new(
        ids,
        features,
        labels,
        manifest.class_count,
        &edges,
        manifest.directed,
    )
}

/// Writes `nodes.csv`, `edges.csv` and `manifest.json` into `dir`.
/// Floats use the shortest round-trip representation, so loading the result
/// reproduces the graph exactly (splits are not part of the format).
pub fn save_dataset(g: &Graph, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let nodes_path = dir.join("nodes.csv");
    let mut out = String::from("node_id,label");
    for j in 0..g.feature_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for u in 0..g.num_nodes() {
        out.push_str(&format!("{},{}", g.node_ids[u], g.labels[u]));
        for x in g.features.row(u) {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    fs::write(&nodes_path, out).map_err(|e| Error::io(&nodes_path, e))?;

    let edges_path = dir.join("edges.csv");
    let mut out = String::from("src,dst,prob\n");
    for (u, v, p) in g.links() {
        out.push_str(&format!("{},{},{p}\n", g.node_ids[u], g.node_ids[v]));
    }
    fs::write(&edges_path, out).map_err(|e| Error::io(&edges_path, e))?;

    let manifest = DatasetManifest {
        name: name.to_string(),
        nodes_file: "nodes.csv".into(),
        edges_file: "edges.csv".into(),
        feature_dim: g.feature_dim(),
        class_count: g.num_classes,
        directed: g.directed,
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Randomly assigns `round(fraction × n)` nodes to each split.
pub fn make_splits(g: Graph, fractions: (f64, f64, f64), rng: &mut RngStream) -> Result<Graph> {
    let (train, val, test) = fractions;
    if [train, val, test].iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::arg("split fractions must be nonnegative"));
    }
    if train + val + test > 1.0 + 1e-12 {
        return Err(Error::arg(format!(
            "split fractions sum to {} > 1",
            train + val + test
        )));
    }
    let n = g.num_nodes();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let count = |f: f64| ((f * n as f64).round() as usize).min(n);
    let n_train = count(train);
    let n_val = count(val).min(n - n_train);
    let n_test = count(test).min(n - n_train - n_val);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&order[..n_train]),
        val: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..n_train + n_val + n_test]),
    };
    g.with_splits(splits)
}

/// Feature-noise level: `level_pct` percent of the grand feature mean, used
/// as the variance of every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level_pct: f64,
    pub per_feature_variance: Vec<f64>,
}

impl NoiseSpec {
    pub fn zero(feature_dim: usize) -> Self {
        Self {
            level_pct: 0.0,
            per_feature_variance: vec![0.0; feature_dim],
        }
    }

    /// `rows × d` matrix repeating the per-feature variances on every row.
    pub fn variance_matrix(&self, rows: usize) -> DenseMatrix {
        let d = self.per_feature_variance.len();
        DenseMatrix::from_fn(rows, d, |_, c| self.per_feature_variance[c])
    }

    pub fn mean_variance(&self) -> f64 {
        let n = self.per_feature_variance.len().max(1) as f64;
        self.per_feature_variance.iter().sum::<f64>() / n
    }
}

pub fn derive_noise_variance(g: &Graph, level_pct: f64) -> Result<NoiseSpec> {
    if !(level_pct >= 0.0) || !level_pct.is_finite() {
        return Err(Error::arg(format!("noise level {level_pct} must be >= 0")));
    }
    let variance = if level_pct == 0.0 {
        0.0
    } else {
        level_pct / 100.0 * g.features.mean()
    };
    if variance < 0.0 {
        return Err(Error::Validation(format!(
            "negative grand feature mean {} gives a negative noise variance",
            g.features.mean()
        )));
    }
    Ok(NoiseSpec {
        level_pct,
        per_feature_variance: vec![variance; g.feature_dim()],
    })
}

/// `h = h* + ε` with independent `ε ~ N(0, Σ)` per node and feature.
pub fn inject_feature_noise(
    features: &DenseMatrix,
    spec: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<DenseMatrix> {
    if spec.per_feature_variance.len() != features.cols() {
        return Err(Error::shape(format!(
            "noise spec for {} features applied to {}",
            spec.per_feature_variance.len(),
            features.cols()
        )));
    }
    let mut out = features.clone();
    for r in 0..out.rows() {
        for (x, &var) in out.row_mut(r).iter_mut().zip(&spec.per_feature_variance) {
            *x = sample_gaussian(rng, *x, var)?;
        }
    }
    Ok(out)
}

/// Planted-partition generator parameters. Class `c` has mean feature vector
/// `offset + signal · [j mod classes == c]`, plus unit Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default)]
    pub offset: f64,
    /// Probability that a node's observed label is replaced by a different
    /// class, drawn after features and links are generated.
    #[serde(default)]
    pub label_noise: f64,
}

fn default_signal() -> f64 {
    3.0
}

impl SyntheticSpec {
    pub fn new(
        nodes: usize,
        classes: usize,
        intra_p: f64,
        inter_p: f64,
        feature_dim: usize,
    ) -> Self {
        Self {
            nodes,
            classes,
            intra_p,
            inter_p,
            feature_dim,
            signal: default_signal(),
            offset: 0.0,
            label_noise: 0.0,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut RngStream) -> Result<Graph> {
    let SyntheticSpec {
        nodes: n,
        classes,
        intra_p,
        inter_p,
        feature_dim: d,
        signal,
        offset,
        label_noise,
    } = *spec;
    if classes == 0 || n < classes {
        return Err(Error::arg(format!(
            "need nodes >= classes >= 1, got {n} and {classes}"
        )));
    }
    if !(0.0..=1.0).contains(&intra_p) || !(0.0..=1.0).contains(&inter_p) {
        return Err(Error::arg("edge probabilities must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&label_noise) || (label_noise > 0.0 && classes < 2) {
        return Err(Error::arg(
            "label noise must lie in [0, 1] and needs two classes",
        ));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = DenseMatrix::from_fn(n, d, |r, c| {
        let mean = offset
            + if c % classes == labels[r] {
                signal
            } else {
                0.0
            };
        mean + rng.standard_normal()
    });
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] {
                intra_p
            } else {
                inter_p
            };
            if rng.bernoulli(p) {
                // uniform on (0, 1]
                let prob = 1.0 - rng.uniform();
                edges.push((u, v, prob));
            }
        }
    }
    if label_noise > 0.0 {
        for l in labels.iter_mut() {
            if rng.bernoulli(label_noise) {
                *l = (*l + 1 + rng.below(classes - 1)) % classes;
            }
        }
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    Graph::new(ids, features, labels, classes, &edges, false)
}
