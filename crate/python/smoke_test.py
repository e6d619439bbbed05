"""Smoke test for the graphuq extension module."""

import math
import os
import tempfile

import graphuq


def main():
    g = graphuq.Graph.synthetic(120, 3, 0.1, 0.01, 8, seed=1).split(seed=1)
    train, val, test = g.splits()
    assert g.num_nodes == 120 and len(train) + len(val) + len(test) == 120
    print(g)

    model, trace = graphuq.Model.train(g, epochs=30, learning_rate=0.01, seed=1)
    assert len(trace) == 30
    acc = model.accuracy(g)
    print(f"test accuracy {acc:.3f}")
    assert acc > 0.5

    probs = model.predict(g)
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in probs)

    zeros = [[0.0] * g.feature_dim for _ in range(g.num_nodes)]
    mean, var = model.propagate(g, g.features(), zeros)
    assert max(abs(a - b) for ra, rb in zip(mean, probs) for a, b in zip(ra, rb)) < 1e-12
    assert all(v == 0.0 for row in var for v in row)

    report = model.evaluate(g, 5.0, mc_samples=20, seed=3)
    print(report)
    assert report["mean_output_variance"] > 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        model.save(path)
        again = graphuq.Model.load(path)
        assert again.predict(g) == probs
        manifest = g.save(d, "toy")
        assert graphuq.Graph.load(manifest).num_links == g.num_links

    m, v = graphuq.relu_moments(0.3, 0.5)
    qm, qv = graphuq.relu_quadrature(0.3, 0.5)
    assert abs(m - qm) < 1e-9 and abs(v - qv) < 1e-9
    assert abs(graphuq.std_normal_cdf(0.0) - 0.5) < 1e-15
    assert math.isclose(graphuq.nll_per_class(1.0, 0.8, 0.1), 0.5 * math.log(0.1) + 0.2)

    passed, text = graphuq.oracle_check("path3", samples=20000, seed=0)
    print(text, end="")
    assert passed

    try:
        graphuq.nll_per_class(1.0, float("nan"), 0.1)
    except (ValueError, RuntimeError):
        pass
    else:
        raise AssertionError("NaN input accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
