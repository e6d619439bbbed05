//! Monte-Carlo ground truth for the moment-propagation engine: draw input
//! noise, run the deterministic network, and accumulate empirical moments
//! with their standard errors.

use serde::Serialize;

use crate::adf::{adf_trace, AdfOptions, MomentMatrix, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{sample_gaussian, std_normal_cdf, std_normal_pdf, DenseMatrix, RngStream};
use crate::model::{
    forward_trace, sample_dropout_mask, Activation, DenseLayer, DropoutMasks, EmbedLayer,
    ModelParams,
};
use crate::streams;

/// Smallest sample count accepted by the oracle.
pub const MIN_SAMPLES: usize = 100;

/// Empirical moments per node and output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub mean: DenseMatrix,
    /// Unbiased sample variance.
    pub var: DenseMatrix,
    pub se_mean: DenseMatrix,
    pub se_var: DenseMatrix,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleOptions<'a> {
    /// Fixed dropout realisation applied to every draw.
    pub mask: Option<&'a DropoutMasks>,
    /// Draw a fresh dropout mask per sample instead.
    pub sample_dropout: bool,
    /// Realise each link as present (weight 1) or absent (weight 0) with its
    /// probability. Absent links still count towards `|N(u)|`, so the mean
    /// matches the probability-weighted aggregate. Exploratory only.
    pub bernoulli_links: bool,
}

/// Streaming central moments up to order four, one slot per entry.
#[derive(Debug, Clone)]
struct Accumulator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
            m3: vec![0.0; len],
            m4: vec![0.0; len],
        }
    }

    fn push(&mut self, xs: &[f64]) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        for (i, &x) in xs.iter().enumerate() {
            let delta = x - self.mean[i];
            let dn = delta / n;
            let dn2 = dn * dn;
            let t1 = delta * dn * n1;
            self.mean[i] += dn;
            self.m4[i] +=
                t1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2[i] - 4.0 * dn * self.m3[i];
            self.m3[i] += t1 * dn * (n - 2.0) - 3.0 * dn * self.m2[i];
            self.m2[i] += t1;
        }
    }

    fn finish(self, rows: usize, cols: usize) -> OracleEstimate {
        let n = self.n;
        let var: Vec<f64> = self.m2.iter().map(|m2| m2 / (n - 1.0)).collect();
        let se_mean = var.iter().map(|v| (v / n).sqrt()).collect();
        let se_var = self
            .m4
            .iter()
            .zip(&var)
            .map(|(m4, v)| {
                let mu4 = m4 / n;
                ((mu4 - (n - 3.0) / (n - 1.0) * v * v) / n).max(0.0).sqrt()
            })
            .collect();
        let mat = |d: Vec<f64>| DenseMatrix::new(rows, cols, d).expect("finite moments");
        OracleEstimate {
            mean: mat(self.mean),
            var: mat(var),
            se_mean: mat(se_mean),
            se_var: mat(se_var),
            samples: n as usize,
        }
    }
}

fn check_samples(s: usize) -> Result<()> {
    if s < MIN_SAMPLES {
        return Err(Error::arg(format!(
            "oracle needs at least {MIN_SAMPLES} samples, got {s}"
        )));
    }
    Ok(())
}

fn draw_input(input: &MomentMatrix, rng: &mut RngStream) -> Result<DenseMatrix> {
    let mut x = input.mean.clone();
    for (xi, &v) in x.data_mut().iter_mut().zip(input.var.data()) {
        *xi = sample_gaussian(rng, *xi, v)?;
    }
    Ok(x)
}

fn realise_links(g: &Graph, rng: &mut RngStream) -> Result<Graph> {
    g.map_link_probs(|_, _, p| if rng.bernoulli(p) { 1.0 } else { 0.0 })
}

/// Samples the network end to end and returns moments after every layer,
/// using the same convention as [`adf_trace`] (softmax layers as logits).
pub fn oracle_trace(
    params: &ModelParams,
    g: &Graph,
    input: &MomentMatrix,
    samples: usize,
    seed: u64,
    opts: OracleOptions,
) -> Result<Vec<OracleEstimate>> {
    check_samples(samples)?;
    let mut accs: Option<Vec<Accumulator>> = None;
    let mut shapes = Vec::new();
    for s in 0..samples as u64 {
        let mut rng = RngStream::new(seed, streams::ORACLE_BASE + s);
        let x = draw_input(input, &mut rng)?;
        let drawn = opts
            .sample_dropout
            .then(|| sample_dropout_mask(params, &mut rng));
        let mask = drawn.as_ref().or(opts.mask);
        let realised = if opts.bernoulli_links {
            Some(realise_links(g, &mut rng)?)
        } else {
            None
        };
        let trace = forward_trace(params, realised.as_ref().unwrap_or(g), &x, mask)?;
        let accs = accs.get_or_insert_with(|| {
            shapes = trace.outputs.iter().map(|o| o.shape()).collect();
            shapes
                .iter()
                .map(|&(r, c)| Accumulator::new(r * c))
                .collect()
        });
        for (acc, out) in accs.iter_mut().zip(&trace.outputs) {
            acc.push(out.data());
        }
    }
    let accs = accs.expect("at least one sample");
    Ok(accs
        .into_iter()
        .zip(shapes)
        .map(|(a, (r, c))| a.finish(r, c))
        .collect())
}

/// Empirical moments of the network output, or of layer `tap` when given.
/// Without a tap a softmax network reports class probabilities.
pub fn oracle_moments(
    params: &ModelParams,
    g: &Graph,
    input_means: &DenseMatrix,
    input_variances: &DenseMatrix,
    samples: usize,
    seed: u64,
    layer_tap: Option<usize>,
) -> Result<OracleEstimate> {
    let input = MomentMatrix::new(input_means.clone(), input_variances.clone())?;
    match layer_tap {
        Some(i) => {
            if i >= params.num_layers() {
                return Err(Error::arg(format!(
                    "layer tap {i} out of range for {} layers",
                    params.num_layers()
                )));
            }
            let mut layers =
                oracle_trace(params, g, &input, samples, seed, OracleOptions::default())?;
            Ok(layers.swap_remove(i))
        }
        None => {
            check_samples(samples)?;
            let mut acc: Option<(Accumulator, usize, usize)> = None;
            for s in 0..samples as u64 {
                let mut rng = RngStream::new(seed, streams::ORACLE_BASE + s);
                let x = draw_input(&input, &mut rng)?;
                let out = forward_trace(params, g, &x, None)?.into_output();
                let (a, _, _) = acc.get_or_insert_with(|| {
                    (Accumulator::new(out.data().len()), out.rows(), out.cols())
                });
                a.push(out.data());
            }
            let (a, r, c) = acc.expect("at least one sample");
            Ok(a.finish(r, c))
        }
    }
}

/// The network truncated to layer `i` alone.
fn single_layer(params: &ModelParams, i: usize) -> (ModelParams, usize) {
    let ne = params.embed.len();
    let (embed, mlp): (Vec<EmbedLayer>, Vec<DenseLayer>) = if i < ne {
        (vec![params.embed[i].clone()], Vec::new())
    } else {
        (Vec::new(), vec![params.mlp[i - ne].clone()])
    };
    let sub = ModelParams {
        embed,
        mlp,
        dropout_rate: params.dropout_rate,
        seed: params.seed,
    };
    (sub, ne)
}

fn single_mask(masks: &DropoutMasks, i: usize, ne: usize) -> DropoutMasks {
    if i < ne {
        DropoutMasks {
            embed: vec![masks.embed[i].clone()],
            mlp: Vec::new(),
        }
    } else {
        DropoutMasks {
            embed: Vec::new(),
            mlp: vec![masks.mlp[i - ne].clone()],
        }
    }
}

/// Checks each layer in isolation: layer `i` is fed independent Gaussian
/// draws from `previous[i]` (the input moments for `i = 0`, otherwise the
/// propagated moments of layer `i - 1`).
pub fn oracle_layerwise(
    params: &ModelParams,
    g: &Graph,
    previous: &[MomentMatrix],
    samples: usize,
    seed: u64,
    opts: OracleOptions,
) -> Result<Vec<OracleEstimate>> {
    check_samples(samples)?;
    if previous.len() != params.num_layers() {
        return Err(Error::arg("one input moment set per layer is required"));
    }
    let mut out = Vec::with_capacity(previous.len());
    for (i, input) in previous.iter().enumerate() {
        let (sub, ne) = single_layer(params, i);
        let fixed = opts.mask.map(|m| single_mask(m, i, ne));
        let sub_opts = OracleOptions {
            mask: fixed.as_ref(),
            ..opts
        };
        let layer_seed = seed ^ ((i as u64 + 1) << 48);
        let mut est = oracle_trace(&sub, g, input, samples, layer_seed, sub_opts)?;
        out.push(est.swap_remove(0));
    }
    Ok(out)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * x * p2 - (jf - 1.0) * p3) / jf;
            }
            dp = nf * (x * p1 - p2) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Mean and variance of `max(X, 0)` for `X ~ N(μ, v)` by composite
/// Gauss–Legendre quadrature over `[max(0, μ − 12σ), μ + 12σ]`. The kink at
/// zero sits on an interval end, so the integrand is smooth on every panel.
pub fn relu_quadrature(mu: f64, v: f64) -> Result<(f64, f64)> {
    if !(v > 0.0) || !mu.is_finite() || !v.is_finite() {
        return Err(Error::arg(format!(
            "quadrature needs v > 0, got ({mu}, {v})"
        )));
    }
    let sigma = v.sqrt();
    let hi = mu + 12.0 * sigma;
    if hi <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let lo = (mu - 12.0 * sigma).max(0.0);
    const PANELS: usize = 48;
    let (xs, ws) = gauss_legendre(32);
    let density = |x: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let integrate = |f: &dyn Fn(f64) -> f64| {
        let h = (hi - lo) / PANELS as f64;
        let mut total = 0.0;
        for p in 0..PANELS {
            let a = lo + p as f64 * h;
            let mid = a + 0.5 * h;
            let mut s = 0.0;
            for (x, w) in xs.iter().zip(&ws) {
                let t = mid + 0.5 * h * x;
                s += w * f(t) * density(t);
            }
            total += 0.5 * h * s;
        }
        total
    };
    let mass = integrate(&|_| 1.0);
    let mean = integrate(&|x| x);
    let spread = integrate(&|x| (x - mean) * (x - mean));
    let var = spread + mean * mean * (1.0 - mass).max(0.0);
    Ok((mean, var))
}

/// `z` such that `P(|Z| > z) = 0.0027 / k`: the three-sigma level with a
/// Bonferroni correction over `k` simultaneous comparisons.
pub fn family_z(k: usize) -> f64 {
    let tail = 0.0027 / (2.0 * k.max(1) as f64);
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(-mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A small network with its graph and input moments.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub graph: Graph,
    pub params: ModelParams,
    pub input: MomentMatrix,
}

impl Fixture {
    pub fn has_relu(&self) -> bool {
        self.params
            .embed
            .iter()
            .map(|l| l.activation)
            .chain(self.params.mlp.iter().map(|l| l.activation))
            .any(|a| a == Activation::Relu)
    }
}

fn mat(rows: &[&[f64]]) -> DenseMatrix {
    DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .expect("fixture matrix")
}

fn graph(n: usize, features: DenseMatrix, edges: &[(usize, usize, f64)]) -> Graph {
    let ids = (0..n).map(|i| format!("n{i}")).collect();
    Graph::new(ids, features, vec![0; n], 1, edges, false).expect("fixture graph")
}

/// Three-node path `0 – 1 – 2` with link probabilities 1 and 0.5 and a single
/// scalar layer with unit weights. Node 1 propagates to `(3.5, 0.11)`.
pub fn path3_fixture() -> Fixture {
    let features = mat(&[&[1.0], &[2.0], &[4.0]]);
    let g = graph(3, features.clone(), &[(0, 1, 1.0), (1, 2, 0.5)]);
    let params = ModelParams {
        embed: vec![EmbedLayer {
            combine: mat(&[&[1.0]]),
            aggregate: mat(&[&[1.0]]),
            activation: Activation::Linear,
        }],
        mlp: Vec::new(),
        dropout_rate: 0.0,
        seed: 0,
    };
    let var = mat(&[&[0.04], &[0.09], &[0.16]]);
    Fixture {
        name: "path3".into(),
        graph: g,
        params,
        input: MomentMatrix::new(features, var).expect("fixture moments"),
    }
}

fn six_node_graph() -> (Graph, MomentMatrix) {
    let features = mat(&[
        &[0.5, -1.0],
        &[1.5, 0.2],
        &[-0.3, 0.8],
        &[2.0, 1.0],
        &[0.0, -0.5],
        &[-1.2, 0.4],
    ]);
    let var = mat(&[
        &[0.10, 0.05],
        &[0.20, 0.15],
        &[0.05, 0.30],
        &[0.12, 0.08],
        &[0.25, 0.10],
        &[0.07, 0.18],
    ]);
    let edges = [
        (0, 1, 0.9),
        (1, 2, 0.6),
        (2, 3, 1.0),
        (3, 4, 0.3),
        (4, 5, 0.8),
        (5, 0, 0.5),
        (1, 4, 0.7),
    ];
    let g = graph(6, features.clone(), &edges);
    (
        g,
        MomentMatrix::new(features, var).expect("fixture moments"),
    )
}

fn linear_embed(combine: DenseMatrix, aggregate: DenseMatrix) -> EmbedLayer {
    EmbedLayer {
        combine,
        aggregate,
        activation: Activation::Linear,
    }
}

/// Six-node graph, two linear embedding layers (2 → 3 → 2).
pub fn linear2_fixture() -> Fixture {
    let (g, input) = six_node_graph();
    let params = ModelParams {
        embed: vec![
            linear_embed(
                mat(&[&[0.8, -0.4], &[0.3, 0.9], &[-0.6, 0.2]]),
                mat(&[&[0.5, 0.1], &[-0.7, 0.4], &[0.2, -0.3]]),
            ),
            linear_embed(
                mat(&[&[0.6, -0.2, 0.4], &[-0.5, 0.7, 0.1]]),
                mat(&[&[0.3, 0.5, -0.4], &[0.2, -0.1, 0.6]]),
            ),
        ],
        mlp: Vec::new(),
        dropout_rate: 0.0,
        seed: 0,
    };
    Fixture {
        name: "linear2".into(),
        graph: g,
        params,
        input,
    }
}

/// [`linear2_fixture`] followed by a ReLU dense layer (2 → 3).
pub fn relu_mlp_fixture() -> Fixture {
    let mut f = linear2_fixture();
    f.name = "relu-mlp".into();
    f.params.mlp.push(DenseLayer {
        weight: mat(&[&[1.1, -0.6], &[-0.4, 0.9], &[0.7, 0.5]]),
        bias: vec![0.1, -0.2, 0.05],
        activation: Activation::Relu,
    });
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// One to three linear layers.
    Linear,
    /// Linear embedding layers followed by one or two ReLU dense layers.
    Mixed,
}

/// Random graph of 4–20 nodes with link probabilities in `(0, 1]`, random
/// weights and input variances in `[0.01, 0.5]`.
pub fn random_fixture(kind: FixtureKind, rng: &mut RngStream) -> Fixture {
    let n = 4 + rng.below(17);
    let d_in = 1 + rng.below(3);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.bernoulli(0.3) {
                edges.push((u, v, 1.0 - rng.uniform()));
            }
        }
    }
    let features = DenseMatrix::from_fn(n, d_in, |_, _| 2.0 * rng.uniform() - 1.0);
    let var = DenseMatrix::from_fn(n, d_in, |_, _| 0.01 + 0.49 * rng.uniform());
    let g = graph(n, features.clone(), &edges);

    let (n_embed, n_dense) = match kind {
        FixtureKind::Linear => {
            let layers = 1 + rng.below(3);
            let embed = 1 + rng.below(layers);
            (embed, layers - embed)
        }
        FixtureKind::Mixed => (1 + rng.below(2), 1 + rng.below(2)),
    };
    let weight = |r: usize, c: usize, rng: &mut RngStream| {
        DenseMatrix::from_fn(r, c, |_, _| 2.0 * rng.uniform() - 1.0)
    };
    let mut width = d_in;
    let mut embed = Vec::new();
    for _ in 0..n_embed {
        let out = 1 + rng.below(3);
        let c = weight(out, width, rng);
        let a = weight(out, width, rng);
        embed.push(linear_embed(c, a));
        width = out;
    }
    let mut mlp = Vec::new();
    for _ in 0..n_dense {
        let out = 1 + rng.below(3);
        let w = weight(out, width, rng);
        let bias = (0..out).map(|_| rng.uniform() - 0.5).collect();
        let activation = match kind {
            FixtureKind::Linear => Activation::Linear,
            FixtureKind::Mixed => Activation::Relu,
        };
        mlp.push(DenseLayer {
            weight: w,
            bias,
            activation,
        });
        width = out;
    }
    let params = ModelParams {
        embed,
        mlp,
        dropout_rate: 0.0,
        seed: 0,
    };
    Fixture {
        name: format!("random-{kind:?}-{n}").to_lowercase(),
        graph: g,
        params,
        input: MomentMatrix::new(features, var).expect("fixture moments"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckMode {
    /// Each layer sampled from the propagated moments of the layer before.
    LayerWise,
    /// The whole network sampled from the input noise alone.
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerance {
    /// Multiplier on the standard error; see [`family_z`].
    pub z: f64,
    /// Relative variance error accepted in place of the standard-error test.
    pub rel_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub entries: usize,
    /// Largest `|adf − oracle| / se` over the layer's means.
    pub max_mean_z: f64,
    pub max_var_z: f64,
    pub max_var_rel: f64,
    /// Entry with the worst variance disagreement: (node, dim, adf, oracle, se).
    pub worst_var: (usize, usize, f64, f64, f64),
    pub mean_ok: bool,
    pub var_ok: bool,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.var_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheckReport {
    pub fixture: String,
    pub mode: CheckMode,
    pub samples: usize,
    pub tolerance: Tolerance,
    pub layers: Vec<LayerCheck>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerCheck::passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "fixture {} ({:?}, S = {}, z = {:.3}{})\n",
            self.fixture,
            self.mode,
            self.samples,
            self.tolerance.z,
            self.tolerance
                .rel_var
                .map_or(String::new(), |r| format!(", rel var {r}"))
        );
        for l in &self.layers {
            let (u, d, adf, orc, se) = l.worst_var;
            s.push_str(&format!(
                "  layer {}: {} entries, mean z {:.2}, var z {:.2}, var rel {:.4}; worst var node {u} dim {d}: adf {adf:.6e} oracle {orc:.6e} se {se:.2e}  {}\n",
                l.layer,
                l.entries,
                l.max_mean_z,
                l.max_var_z,
                l.max_var_rel,
                if l.passed() { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(if self.passed() { "PASS\n" } else { "FAIL\n" });
        s
    }
}

fn z_score(diff: f64, se: f64, slack: f64) -> f64 {
    if diff <= slack {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        (diff - slack) / se
    }
}

fn max_abs(m: &DenseMatrix) -> f64 {
    m.data().iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Fourth central moment of `max(X, 0)` for `X ~ N(mu, v)`, from partial
/// moments of `X − m` over `X > 0` (stable when the unit is almost always
/// active).
pub fn rectified_fourth_moment(mu: f64, v: f64) -> f64 {
    if !(v > 0.0) {
        return 0.0;
    }
    let sigma = v.sqrt();
    let t = mu / sigma;
    let (cdf, pdf) = (std_normal_cdf(t), std_normal_pdf(t));
    let m = mu * cdf + sigma * pdf;
    let shift = mu - m;
    // j[k] = E[(X − m)^k ; X > 0]
    let mut j = [0.0; 5];
    j[0] = cdf;
    for k in 1..5 {
        let prev2 = if k >= 2 { j[k - 2] } else { 0.0 };
        j[k] =
            shift * j[k - 1] + (k - 1) as f64 * v * prev2 + sigma * (-m).powi(k as i32 - 1) * pdf;
    }
    (std_normal_cdf(-t) * m.powi(4) + j[4]).max(0.0)
}

/// Standard errors the sample moments would have if the propagated
/// distribution were exact. `pre` holds the pre-activation moments of a ReLU
/// layer; otherwise the layer is taken as Gaussian.
fn null_standard_errors(v: f64, pre: Option<(f64, f64)>, samples: usize) -> (f64, f64) {
    let s = samples as f64;
    let m4 = match pre {
        Some((mu, pv)) => rectified_fourth_moment(mu, pv),
        None => 3.0 * v * v,
    };
    ((v / s).sqrt(), ((m4 - v * v).max(0.0) / s).sqrt())
}

/// Compares propagated moments with oracle moments entry by entry.
///
/// Each difference is scaled by the larger of the oracle's empirical standard
/// error and the one implied by the propagated distribution. The empirical
/// error collapses to zero for a ReLU unit that is active in none of the
/// draws; the implied one does not. Differences below the engine's variance
/// floor are treated as rounding.
pub fn compare_layer(
    layer: usize,
    adf: &MomentMatrix,
    relu_pre: Option<&MomentMatrix>,
    oracle: &OracleEstimate,
    tol: Tolerance,
) -> LayerCheck {
    let mut check = LayerCheck {
        layer,
        entries: adf.mean.data().len(),
        max_mean_z: 0.0,
        max_var_z: 0.0,
        max_var_rel: 0.0,
        worst_var: (0, 0, 0.0, 0.0, 0.0),
        mean_ok: true,
        var_ok: true,
    };
    let mean_slack = VARIANCE_FLOOR * max_abs(&oracle.mean).max(max_abs(&adf.mean)).max(1.0);
    let var_slack = VARIANCE_FLOOR;
    let cols = adf.mean.cols();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..check.entries {
        let v = adf.var.data()[i];
        let pre = relu_pre.map(|p| (p.mean.data()[i], p.var.data()[i]));
        let (null_sm, null_sv) = null_standard_errors(v, pre, oracle.samples);

        let (m, om) = (adf.mean.data()[i], oracle.mean.data()[i]);
        let sm = oracle.se_mean.data()[i].max(null_sm);
        let zm = z_score((m - om).abs(), sm, mean_slack);
        check.max_mean_z = check.max_mean_z.max(zm);
        if zm > tol.z {
            check.mean_ok = false;
        }

        let ov = oracle.var.data()[i];
        let sv = oracle.se_var.data()[i].max(null_sv);
        let diff = (v - ov).abs();
        let zv = z_score(diff, sv, var_slack);
        let rel = if diff <= var_slack { 0.0 } else { diff / ov };
        check.max_var_z = check.max_var_z.max(zv);
        check.max_var_rel = check.max_var_rel.max(rel);
        let ok = zv <= tol.z || tol.rel_var.is_some_and(|r| rel <= r);
        if !ok {
            check.var_ok = false;
        }
        if zv.min(f64::MAX) > worst {
            worst = zv.min(f64::MAX);
            check.worst_var = (i / cols, i % cols, v, ov, sv);
        }
    }
    check
}

/// Propagated moments of layer `i` before its ReLU, or `None` if the layer
/// has another activation.
fn relu_preactivation(
    params: &ModelParams,
    g: &Graph,
    input: &MomentMatrix,
    i: usize,
    opts: AdfOptions,
) -> Result<Option<MomentMatrix>> {
    let mut linear = params.clone();
    let ne = linear.embed.len();
    let act = if i < ne {
        &mut linear.embed[i].activation
    } else {
        &mut linear.mlp[i - ne].activation
    };
    if *act != Activation::Relu {
        return Ok(None);
    }
    *act = Activation::Linear;
    let mut trace = adf_trace(&linear, g, input, None, opts)?;
    trace.truncate(i + 1);
    Ok(trace.pop())
}

/// Runs the propagation engine and the sampling oracle on one fixture and
/// compares them layer by layer.
pub fn oracle_check(
    fixture: &Fixture,
    samples: usize,
    seed: u64,
    mode: CheckMode,
    rel_var: Option<f64>,
    adf_opts: AdfOptions,
) -> Result<OracleCheckReport> {
    let params = &fixture.params;
    let g = &fixture.graph;
    let adf = adf_trace(params, g, &fixture.input, None, adf_opts)?;
    let oracle = match mode {
        CheckMode::EndToEnd => oracle_trace(
            params,
            g,
            &fixture.input,
            samples,
            seed,
            OracleOptions::default(),
        )?,
        CheckMode::LayerWise => {
            let mut previous = vec![fixture.input.clone()];
            previous.extend(adf[..adf.len() - 1].iter().cloned());
            oracle_layerwise(
                params,
                g,
                &previous,
                samples,
                seed,
                OracleOptions::default(),
            )?
        }
    };
    let entries: usize = adf.iter().map(|m| 2 * m.mean.data().len()).sum();
    let tol = Tolerance {
        z: family_z(entries),
        rel_var,
    };
    let mut layers = Vec::with_capacity(adf.len());
    for (i, (a, o)) in adf.iter().zip(&oracle).enumerate() {
        let pre = relu_preactivation(params, g, &fixture.input, i, adf_opts)?;
        layers.push(compare_layer(i, a, pre.as_ref(), o, tol));
    }
    Ok(OracleCheckReport {
        fixture: fixture.name.clone(),
        mode,
        samples,
        tolerance: tol,
        layers,
    })
}
