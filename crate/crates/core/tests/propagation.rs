mod common;

use graphuq::adf::{adf_trace, AdfOptions};
use graphuq::model::{Activation, DenseLayer};
use graphuq::oracle::{
    family_z, linear2_fixture, oracle_check, oracle_trace, path3_fixture, random_fixture,
    relu_mlp_fixture, CheckMode, Fixture, FixtureKind, OracleOptions,
};
use graphuq::{
    adf_forward, full_forward, oracle_moments, streams, DenseMatrix, Graph, ModelParams,
    MomentMatrix, RngStream,
};
use proptest::prelude::*;

use common::{six_node_graph, small_params, zeros_like};

fn fixture(kind: FixtureKind, i: u64) -> Fixture {
    random_fixture(kind, &mut RngStream::new(i, streams::FIXTURE))
}

/// Exact output variances of an affine network: probe the linear map with
/// unit inputs and apply `diag(M diag(v) Mᵀ)`, which keeps every covariance
/// the diagonal propagation drops.
fn exact_affine_variance(params: &ModelParams, g: &Graph, input: &MomentMatrix) -> DenseMatrix {
    let (n, d) = input.mean.shape();
    let base = full_forward(params, g, &DenseMatrix::zeros(n, d), None).unwrap();
    let mut var = zeros_like(&base);
    for u in 0..n {
        for j in 0..d {
            let mut e = DenseMatrix::zeros(n, d);
            e.row_mut(u)[j] = 1.0;
            let col = full_forward(params, g, &e, None).unwrap();
            let v = input.var.row(u)[j];
            for ((out, &y), &b) in var.data_mut().iter_mut().zip(col.data()).zip(base.data()) {
                *out += (y - b) * (y - b) * v;
            }
        }
    }
    var
}

#[test]
fn zero_variance_collapses_to_forward_pass() {
    let g = six_node_graph();
    let params = small_params(&g, 0.0, 8);
    let out = adf_forward(&params, &g, g.features(), &zeros_like(g.features()), None).unwrap();
    assert_eq!(
        out.mean,
        full_forward(&params, &g, g.features(), None).unwrap()
    );
    assert!(out.var.data().iter().all(|&v| v == 0.0));
}

#[test]
fn path3_oracle_matches_hand_values() {
    let f = path3_fixture();
    let est = oracle_moments(
        &f.params,
        &f.graph,
        &f.input.mean,
        &f.input.var,
        100_000,
        1,
        None,
    )
    .unwrap();
    let (m, v) = (est.mean.row(1)[0], est.var.row(1)[0]);
    assert!((m - 3.5).abs() <= 3.0 * est.se_mean.row(1)[0], "mean {m}");
    assert!((v - 0.11).abs() <= 3.0 * est.se_var.row(1)[0], "var {v}");
}

fn single_unit_relu() -> (ModelParams, Graph) {
    let g = Graph::new(
        vec!["a".into()],
        DenseMatrix::zeros(1, 1),
        vec![0],
        1,
        &[],
        false,
    )
    .unwrap();
    let params = ModelParams {
        embed: Vec::new(),
        mlp: vec![DenseLayer {
            weight: DenseMatrix::identity(1),
            bias: vec![0.0],
            activation: Activation::Relu,
        }],
        dropout_rate: 0.0,
        seed: 0,
    };
    (params, g)
}

#[test]
fn single_relu_unit_oracle() {
    let (params, g) = single_unit_relu();
    let one = DenseMatrix::filled(1, 1, 1.0);
    let est = oracle_moments(
        &params,
        &g,
        &DenseMatrix::zeros(1, 1),
        &one,
        1_000_000,
        2,
        None,
    )
    .unwrap();
    let (m, v) = (est.mean.data()[0], est.var.data()[0]);
    assert!(
        (m - 0.398_942_28).abs() <= 3.0 * est.se_mean.data()[0],
        "mean {m}"
    );
    assert!(
        (v - 0.340_845_1).abs() <= 3.0 * est.se_var.data()[0],
        "var {v}"
    );
}

#[test]
fn doubling_samples_shrinks_standard_error() {
    let f = linear2_fixture();
    let run =
        |s| oracle_moments(&f.params, &f.graph, &f.input.mean, &f.input.var, s, 3, None).unwrap();
    let a = run(50_000);
    let b = run(100_000);
    for (x, y) in a.se_mean.data().iter().zip(b.se_mean.data()) {
        let ratio = x / y;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() <= 0.15, "ratio {ratio}");
    }
}

#[test]
fn dense_linear_layer_matches_oracle() {
    let mut rng = RngStream::new(4, streams::FIXTURE);
    let w = DenseMatrix::from_fn(4, 4, |_, _| 2.0 * rng.uniform() - 1.0);
    let params = ModelParams {
        embed: Vec::new(),
        mlp: vec![DenseLayer {
            weight: w,
            bias: vec![0.1, 0.0, -0.2, 0.3],
            activation: Activation::Linear,
        }],
        dropout_rate: 0.0,
        seed: 0,
    };
    let g = Graph::new(
        (0..3).map(|i| i.to_string()).collect(),
        DenseMatrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3),
        vec![0; 3],
        1,
        &[(0, 1, 0.5)],
        false,
    )
    .unwrap();
    let var = DenseMatrix::from_fn(3, 4, |r, c| 0.05 + 0.1 * ((r + c) % 3) as f64);
    let adf = adf_forward(&params, &g, g.features(), &var, None).unwrap();
    let est = oracle_moments(&params, &g, g.features(), &var, 100_000, 5, None).unwrap();
    let z = family_z(2 * 12);
    for i in 0..12 {
        assert!((adf.mean.data()[i] - est.mean.data()[i]).abs() <= z * est.se_mean.data()[i]);
        assert!((adf.var.data()[i] - est.var.data()[i]).abs() <= z * est.se_var.data()[i]);
    }
}

#[test]
fn oracle_agrees_with_exact_affine_variance() {
    for i in 0..50 {
        let f = fixture(FixtureKind::Linear, i);
        let exact = exact_affine_variance(&f.params, &f.graph, &f.input);
        let est = oracle_trace(
            &f.params,
            &f.graph,
            &f.input,
            20_000,
            i,
            OracleOptions::default(),
        )
        .unwrap()
        .pop()
        .unwrap();
        let z = family_z(exact.data().len());
        for ((e, o), se) in exact
            .data()
            .iter()
            .zip(est.var.data())
            .zip(est.se_var.data())
        {
            assert!(
                (e - o).abs() <= z * se + 1e-12,
                "fixture {i}: exact {e} oracle {o} se {se}"
            );
        }
    }
}

#[test]
fn propagated_variance_is_exact_for_one_affine_layer() {
    let mut checked = 0;
    for i in 0..50 {
        let f = fixture(FixtureKind::Linear, i);
        if f.params.num_layers() != 1 {
            continue;
        }
        checked += 1;
        let exact = exact_affine_variance(&f.params, &f.graph, &f.input);
        let adf = adf_forward(&f.params, &f.graph, &f.input.mean, &f.input.var, None).unwrap();
        for (a, e) in adf.var.data().iter().zip(exact.data()) {
            assert!(
                (a - e).abs() <= 1e-12 * e.abs().max(1.0),
                "fixture {i}: {a} vs {e}"
            );
        }
    }
    assert!(checked >= 5);
}

#[test]
fn propagated_means_are_exact_for_affine_networks() {
    for i in 0..50 {
        let f = fixture(FixtureKind::Linear, i);
        let adf = adf_forward(&f.params, &f.graph, &f.input.mean, &f.input.var, None).unwrap();
        let det = full_forward(&f.params, &f.graph, &f.input.mean, None).unwrap();
        assert!(adf.mean.max_abs_diff(&det) <= 1e-12);
    }
}

#[test]
fn layer_wise_checks_pass_on_named_fixtures() {
    for (f, rel) in [(linear2_fixture(), None), (relu_mlp_fixture(), Some(0.1))] {
        let r = oracle_check(
            &f,
            100_000,
            7,
            CheckMode::LayerWise,
            rel,
            AdfOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }
}

#[test]
fn corrupted_rule_fails_end_to_end_too() {
    let f = path3_fixture();
    let opts = AdfOptions {
        corrupt_aggregate_variance: true,
    };
    let r = oracle_check(&f, 100_000, 7, CheckMode::EndToEnd, None, opts).unwrap();
    assert!(!r.passed());
}

#[test]
fn doubling_input_variance_never_lowers_output_variance() {
    for i in 0..100 {
        let f = fixture(FixtureKind::Mixed, 1000 + i);
        let twice = f.input.var.map(|v| 2.0 * v);
        let a = adf_forward(&f.params, &f.graph, &f.input.mean, &f.input.var, None).unwrap();
        let b = adf_forward(&f.params, &f.graph, &f.input.mean, &twice, None).unwrap();
        for (x, y) in a.var.data().iter().zip(b.var.data()) {
            assert!(*y >= x * (1.0 - 1e-12), "fixture {i}: {x} -> {y}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variances_are_nonnegative_and_finite(seed in 0u64..100_000) {
        let f = fixture(FixtureKind::Mixed, seed);
        let layers = adf_trace(&f.params, &f.graph, &f.input, None, AdfOptions::default()).unwrap();
        for l in &layers {
            prop_assert!(l.var.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn affine_variance_scales_linearly(seed in 0u64..100_000, k in 0.01f64..100.0) {
        let f = fixture(FixtureKind::Linear, seed);
        let scaled = f.input.var.map(|v| k * v);
        let a = adf_forward(&f.params, &f.graph, &f.input.mean, &f.input.var, None).unwrap();
        let b = adf_forward(&f.params, &f.graph, &f.input.mean, &scaled, None).unwrap();
        for (x, y) in a.var.data().iter().zip(b.var.data()) {
            prop_assert!((k * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
        }
        prop_assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn zero_probability_links_drop_neighbour_variance(seed in 0u64..100_000) {
        let f = fixture(FixtureKind::Linear, seed);
        let silent = f.graph.map_link_probs(|_, _, _| 0.0).unwrap();
        let ids = (0..silent.num_nodes()).map(|i| i.to_string()).collect();
        let edgeless = Graph::new(ids, silent.features().clone(), silent.labels().to_vec(), 1, &[], false).unwrap();
        let a = adf_forward(&f.params, &silent, &f.input.mean, &f.input.var, None).unwrap();
        let b = adf_forward(&f.params, &edgeless, &f.input.mean, &f.input.var, None).unwrap();
        prop_assert_eq!(a.var, b.var);
        prop_assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn propagation_commutes_with_node_permutation(seed in 0u64..100_000, perm_seed in 0u64..1000) {
        let f = fixture(FixtureKind::Mixed, seed);
        let n = f.graph.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        RngStream::new(perm_seed, streams::SHUFFLE).shuffle(&mut perm);
        let pg = f.graph.permute(&perm).unwrap();
        let mut mean = zeros_like(&f.input.mean);
        let mut var = zeros_like(&f.input.var);
        for (i, &p) in perm.iter().enumerate() {
            mean.row_mut(p).copy_from_slice(f.input.mean.row(i));
            var.row_mut(p).copy_from_slice(f.input.var.row(i));
        }
        let a = adf_forward(&f.params, &f.graph, &f.input.mean, &f.input.var, None).unwrap();
        let b = adf_forward(&f.params, &pg, &mean, &var, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in a.var.row(i).iter().zip(b.var.row(p)) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            for (x, y) in a.mean.row(i).iter().zip(b.mean.row(p)) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
