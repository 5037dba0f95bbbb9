"""Central finite-difference checks of every differentiable op."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import layers, tensor
from . import model as model_mod
from .layers import BNState
from .losses import LossWeights, loss_total
from .model import DecoderWeights, EncoderWeights, ModelWeights, forward_graph, init_weights
from .tensor import CHECK_DTYPE, GradTape, Tensor

OP_TOL = 1e-5
GRAPH_TOL = 1e-4
STEP = 1e-4
KINK_MARGIN = 1e-2


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every element of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = STEP,
                    seed: int = 0) -> float:
    """Relative error between tape and finite-difference gradients, taken over
    the concatenation of all input gradients.

    The output is reduced to a scalar by a fixed random projection.
    """
    arrays = [np.array(a, dtype=CHECK_DTYPE) for a in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    proj = np.random.default_rng(seed).normal(size=fn(*[Tensor(a) for a in arrays]).shape)

    with GradTape() as tape:
        out = fn(*ts)
        scalar = tensor.total_sum(tensor.mul(out, Tensor(proj)))
    tape.backward(scalar)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def value() -> float:
        plain = [Tensor(a) for a in arrays]
        return float(np.sum(fn(*plain).data * proj))

    numeric = [numerical_grad(value, a, h) for a in arrays]
    return relative_error(np.concatenate([g.ravel() for g in analytic]),
                          np.concatenate([g.ravel() for g in numeric]))


@dataclass
class CheckResult:
    op: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def _away_from(rng, shape, points, margin=KINK_MARGIN):
    x = rng.uniform(-2, 2, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-300) * margin * 2
    return x


def _dims(rng, n, lo=1, hi=6):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _op_cases(rng) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per op; small dims (<= 6 per axis)."""
    b, c, h, w = _dims(rng, 4)
    c2 = int(rng.integers(1, 5))
    bn_shape = (int(rng.integers(2, 4)), c, h, w)
    even = (b, c, 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
    small = (b, c, h, w)
    bn_state = lambda: BNState.fresh(c, CHECK_DTYPE)
    return {
        "add": (lambda x, y: x + y, [rng.normal(size=small), rng.normal(size=small)]),
        "sub": (lambda x, y: x - y, [rng.normal(size=small), rng.normal(size=small)]),
        "mul": (lambda x, y: x * y, [rng.normal(size=small), rng.normal(size=small)]),
        "sum": (lambda x: tensor.total_sum(x), [rng.normal(size=small)]),
        "mean": (lambda x: tensor.mean(x), [rng.normal(size=small)]),
        "concat": (lambda x, y: tensor.concat([x, y]), [rng.normal(size=small), rng.normal(size=small)]),
        "take": (lambda x: x[: max(1, b // 2)], [rng.normal(size=small)]),
        "conv2d": (lambda x, k, bias: layers.conv2d(x, k, bias, 1, 1),
                   [rng.normal(size=small), rng.normal(size=(c2, c, 3, 3)), rng.normal(size=c2)]),
        "batch_norm": (lambda x, g, be: layers.batch_norm(x, g, be, bn_state(), train=True),
                       [rng.normal(size=bn_shape), rng.uniform(0.5, 2, size=c), rng.normal(size=c)]),
        "relu": (layers.relu, [_away_from(rng, small, [0.0])]),
        "clamp01": (layers.clamp01, [_away_from(rng, small, [0.0, 1.0])]),
        "avg_pool2": (layers.avg_pool2, [rng.normal(size=even)]),
        "upsample2": (layers.upsample2, [rng.normal(size=small)]),
        "frobenius_norm": (lambda x: layers.frobenius_norm(x, per_sample=True), [rng.normal(size=small)]),
        "sum_squares": (lambda x: layers.sum_squares(x, per_sample=True), [rng.normal(size=small)]),
        "pearson": (lambda x, y: layers.pearson(x, y, per_sample=True),
                    [rng.normal(size=(b, c, h, w + 1)), rng.normal(size=(b, c, h, w + 1))]),
    }


OPS = tuple(_op_cases(np.random.default_rng(0)))


def graph_case(seed: int = 0, width: int = 4, size: int = 8, joint: bool = True):
    """Composite loss of the full connected graph on one ``size x size`` patch.

    Returns ``(fn, inputs)``; the inputs are every model parameter. An 8x8
    patch leaves a 1x1 feature map, so per-call batch statistics would see a
    single value per channel; the joint wiring is the default here for that
    reason.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(seed, width=width, dtype=CHECK_DTYPE)
    r1 = Tensor(rng.uniform(0, 1, size=(1, 3, size, size)))
    r2 = Tensor(rng.uniform(0, 1, size=(1, 3, size, size)))
    x = Tensor(rng.uniform(0, 0.6, size=(1, 1, size, size)))

    def fn(*ps):
        out = forward_graph(r1, r2, _rebind(weights, ps), train=True, joint=joint)
        return loss_total(x, r1, r2, out, LossWeights())[0]

    return fn, [p.data.copy() for p in weights.parameters()]


def _rebind(weights: ModelWeights, ps: Sequence[Tensor]) -> ModelWeights:
    """Copy of ``weights`` whose learnable tensors are ``ps`` (BN statistics shared)."""
    it = iter(ps)

    def blocks(net):
        return [replace(b, kernels=next(it), bias=next(it), gamma=next(it), beta=next(it))
                for b in net.blocks]

    return ModelWeights(EncoderWeights(blocks(weights.encoder)), DecoderWeights(blocks(weights.dec_rgb)),
                        DecoderWeights(blocks(weights.dec_xray)))


def kink_free(seed: int, width: int, size: int, joint: bool = True, margin: float = 1e-3) -> bool:
    """True if no ReLU or clamp input of the graph lies within ``margin`` of a kink."""
    fn, inputs = graph_case(seed, width, size, joint)
    seen = []

    def spy(f, kind):
        def wrapped(x):
            seen.append((kind, x.data))
            return f(x)
        return wrapped

    orig = model_mod.relu, model_mod.clamp01
    model_mod.relu, model_mod.clamp01 = spy(orig[0], "relu"), spy(orig[1], "clamp")
    try:
        fn(*[Tensor(a) for a in inputs])
    finally:
        model_mod.relu, model_mod.clamp01 = orig
    for kind, a in seen:
        ok = np.abs(a) > margin
        if kind == "clamp":
            # exact zeros come from a preceding ReLU and are not kinks here
            ok = (a == 0) | (ok & (np.abs(a - 1) > margin))
        if not np.all(ok):
            return False
    return True


def run_gradcheck(seed: int = 0, trials: int = 10, corrupt: str | None = None,
                  graph: bool = True) -> list[CheckResult]:
    """Check every op ``trials`` times on fresh random inputs, plus the end-to-end loss.

    ``corrupt`` names an op whose backward pass is deliberately perturbed
    (negative control).
    """
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in OPS}
    ctx = tensor.corrupt_backward(corrupt) if corrupt else contextlib.nullcontext()
    with ctx:
        for t in range(trials):
            for name, (fn, inputs) in _op_cases(rng).items():
                worst[name] = max(worst[name], check_gradients(fn, inputs, seed=seed + t))
        results = [CheckResult(name, err, OP_TOL) for name, err in worst.items()]
        if graph:
            s = seed
            while not kink_free(s, 4, 8):
                s += 1
            fn, inputs = graph_case(s)
            results.append(CheckResult("loss_total", check_gradients(fn, inputs, seed=s), GRAPH_TOL))
    return results
