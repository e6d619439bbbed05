#![allow(dead_code)]

use graphuq::graph::{generate_synthetic, make_splits};
use graphuq::model::Activation;
use graphuq::{streams, Architecture, DenseMatrix, Graph, ModelParams, RngStream, SyntheticSpec};

/// Six nodes, two classes, mixed link probabilities, one isolated node.
pub fn six_node_graph() -> Graph {
    let features = DenseMatrix::from_rows(&[
        vec![0.5, -1.0, 0.2],
        vec![1.5, 0.3, -0.7],
        vec![-0.4, 0.8, 1.1],
        vec![0.9, -0.6, 0.4],
        vec![-1.2, 0.1, 0.6],
        vec![0.3, 1.4, -0.9],
    ])
    .unwrap();
    let ids = (0..6).map(|i| format!("n{i}")).collect();
    let edges = [
        (0, 1, 1.0),
        (0, 2, 0.6),
        (1, 2, 0.3),
        (2, 3, 0.9),
        (3, 4, 0.5),
    ];
    Graph::new(ids, features, vec![0, 1, 0, 1, 1, 0], 2, &edges, false).unwrap()
}

/// Network with ReLU hidden layers and a softmax head, small enough for
/// finite differences.
pub fn small_arch() -> Architecture {
    Architecture {
        embed_dims: vec![4, 3],
        mlp_hidden: vec![5],
        embed_activation: Activation::Linear,
        mlp_activation: Activation::Relu,
    }
}

pub fn small_params(g: &Graph, dropout: f64, seed: u64) -> ModelParams {
    ModelParams::init(
        &small_arch(),
        g.feature_dim(),
        g.num_classes(),
        dropout,
        seed,
    )
    .unwrap()
}

/// Separable planted-partition graph with the default 70/10/20 split.
pub fn planted(nodes: usize, seed: u64) -> Graph {
    let spec = SyntheticSpec::new(nodes, 3, 0.1, 0.01, 16);
    let g = generate_synthetic(&spec, &mut RngStream::new(seed, streams::SYNTHETIC)).unwrap();
    make_splits(
        g,
        (0.7, 0.1, 0.2),
        &mut RngStream::new(seed, streams::SPLIT),
    )
    .unwrap()
}

pub fn zeros_like(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::zeros(m.rows(), m.cols())
}
