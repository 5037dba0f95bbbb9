import numpy as np
import pytest

from xraysep.adam import Adam, AdamState, adam_update
from xraysep.tensor import Tensor


def _param(v):
    return Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)


def test_zero_gradient_first_step_is_noop():
    p = _param([1.0, -2.0])
    st = AdamState.zeros_like(p)
    adam_update(p, np.zeros(2), st, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.t == 1


def test_first_step_moves_by_lr_times_sign():
    # bias correction makes m_hat = g, v_hat = g^2 after one step
    p = _param([0.0, 0.0, 0.0])
    adam_update(p, np.array([3.0, -0.5, 1e-3]), AdamState.zeros_like(p), lr=0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-5)


def test_constant_gradient_unit_step():
    p = _param([0.0])
    st = AdamState.zeros_like(p)
    lr = 1e-3
    steps = []
    for _ in range(2000):
        before = p.data.copy()
        adam_update(p, np.array([0.7]), st, lr)
        steps.append(abs(p.data[0] - before[0]))
    assert steps[-1] == pytest.approx(lr, rel=1e-6)
    assert st.t == 2000


def test_matches_hand_rolled_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = _param(np.zeros(3))
    st = AdamState.zeros_like(p)
    m = v = np.zeros(3)
    x = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_update(p, g, st, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_identical_params_update_identically():
    a, b = _param([1.0, 2.0]), _param([1.0, 2.0])
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    for g in ([0.1, -0.3], [0.2, 0.5]):
        adam_update(a, np.array(g), sa)
        adam_update(b, np.array(g), sb)
    assert a.data.tobytes() == b.data.tobytes()


def test_rebinds_instead_of_mutating():
    p = _param([1.0])
    old = p.data
    adam_update(p, np.array([1.0]), AdamState.zeros_like(p))
    assert old[0] == 1.0 and p.data is not old


def test_errors():
    p = _param([1.0, 2.0])
    with pytest.raises(ValueError):
        adam_update(p, np.zeros(3), AdamState.zeros_like(p))
    with pytest.raises(ValueError):
        adam_update(p, np.zeros(2), AdamState.zeros_like(p), lr=0)


def test_optimizer_handles_missing_grad():
    a, b = _param([1.0]), _param([1.0])
    opt = Adam([a, b], lr=0.1)
    a.grad = np.array([1.0])
    opt.step()
    assert a.data[0] == pytest.approx(0.9) and b.data[0] == 1.0
    opt.zero_grad()
    assert a.grad is None
