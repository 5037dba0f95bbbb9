import time

import numpy as np
import pytest

from xraysep.gradcheck import GRAPH_TOL, OP_TOL, OPS, check_gradients, relative_error, run_gradcheck


@pytest.fixture(scope="module")
def report():
    t0 = time.perf_counter()
    res = run_gradcheck(seed=0, trials=10)
    return res, time.perf_counter() - t0


def test_all_ops_pass(report):
    res, _ = report
    failing = [(r.op, r.rel_error) for r in res if not r.passed]
    assert not failing


def test_every_op_listed_once(report):
    res, _ = report
    names = [r.op for r in res]
    assert len(names) == len(set(names))
    assert set(names) == set(OPS) | {"loss_total"}
    for op in ("conv2d", "batch_norm", "relu", "avg_pool2", "upsample2", "frobenius_norm", "pearson"):
        assert op in names


def test_tolerances(report):
    res, seconds = report
    tol = {r.op: r.tol for r in res}
    assert tol["loss_total"] == GRAPH_TOL == 1e-4
    assert tol["conv2d"] == OP_TOL == 1e-5
    assert seconds < 60


@pytest.mark.parametrize("op", ["conv2d", "upsample2", "batch_norm", "pearson"])
def test_corrupted_backward_is_caught(op):
    res = {r.op: r for r in run_gradcheck(seed=1, trials=1, corrupt=op, graph=False)}
    assert not res[op].passed
    assert all(r.passed for name, r in res.items() if name != op)


def test_check_gradients_detects_wrong_rule():
    from xraysep.tensor import Tensor, make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")   # missing factor 2

    assert check_gradients(bad_square, [np.random.default_rng(0).normal(size=5)]) > 0.1
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    _ = Tensor
