"""Smoke test for the equiagg_py extension.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import os
import random
import statistics
import tempfile

import equiagg_py as ea


def check_closed_forms():
    rng = random.Random(0)
    xs = [rng.random() for _ in range(9)]
    rows = [[x] for x in xs]
    for kind, expected in [("mean", statistics.fmean(xs)), ("median", statistics.median(xs)),
                           ("max", max(xs)), ("sum", sum(xs))]:
        got = ea.Aggregator.closed_form(kind)(rows)[0]
        assert abs(got - expected) < 1e-3, (kind, got, expected)


def check_gaussian_map():
    rows = [[0.5, -1.0], [1.5, 0.0], [1.0, 2.0]]
    sigma, prior = 1.0, 2.0
    got = ea.Aggregator.gaussian_map(sigma, prior)(rows)
    prec = 1 / prior**2 + len(rows) / sigma**2
    for j, g in enumerate(got):
        want = sum(r[j] for r in rows) / sigma**2 / prec
        assert abs(g - want) < 1e-5, (g, want)


def check_invariance():
    rng = random.Random(1)
    rows = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(7)]
    for kind in ["equilibrium", "sum", "mean", "max", "attention", "pna"]:
        agg = ea.Aggregator(kind, input_dim=3, output_dim=4, seed=2)
        assert agg.permutation_error(rows) < 1e-6, kind


def check_power_sums():
    x = [0.1, 0.4, 0.4, 0.9]
    back = ea.power_sum_invert(ea.power_sum_forward(x))
    assert max(abs(a - b) for a, b in zip(sorted(x), back)) < 1e-6, back


def check_train_and_checkpoint():
    cfg = ea.RunConfig(
        "task = median\nmodel.aggregator = equilibrium\n",
        [("train.steps", "4"), ("train.batch_size", "2"), ("train.eval_period", "2"),
         ("train.eval_samples", "3"), ("median.set_size", "8")],
    )
    assert ea.RunConfig(cfg.to_text()).to_text() == cfg.to_text()
    with tempfile.TemporaryDirectory() as d:
        out = ea.train(cfg, d)
        assert out["status"] == "completed", out
        assert [m["step"] for m in out["metrics"]] == [2, 4]
        ck = ea.load_checkpoint(os.path.join(d, "checkpoint.bin"))
        assert ck["step"] == 4 and "inner.lr" in ck["params"]
        assert ea.evaluate_checkpoint(os.path.join(d, "checkpoint.bin"), 5) >= 0.0


def check_verify():
    checks = ea.verify("universality")
    assert len(checks) == 3 and all(passed for _, _, _, passed in checks), checks


def check_errors():
    for bad in [lambda: ea.RunConfig("train.nope = 1"), lambda: ea.Aggregator("nope", 2),
                lambda: ea.verify("nope"), lambda: ea.Aggregator.closed_form("mean")([])]:
        try:
            bad()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("check_"):
            fn()
            print(f"ok {name[6:]}")
