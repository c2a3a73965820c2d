import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avsdf.errors import ContractViolation, RejectedInput
from avsdf.numerics import AdamState, T, Tape, Tensor, adam_step, no_grad
from avsdf.numerics.tensor import _stable_gemm

from conftest import directional_gradcheck
from gradcases import OPS


def grad_of(fn, *xs):
    ts = [Tensor(np.asarray(x, np.float64), requires_grad=True) for x in xs]
    with Tape() as tape:
        out = fn(*ts)
    return tape.backward(out, ts)


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])


def test_min_reduce_value_and_index():
    v, i = T.min_reduce(Tensor(np.array([0.3, -0.1, 0.2])))
    assert float(v.data) == pytest.approx(-0.1)
    assert int(i) == 1


def test_square_grad():
    (g,) = grad_of(lambda x: T.sum(T.square(x)), [3.0])
    assert g[0] == pytest.approx(6.0)


def test_relu_of_min_takes_argmin_branch():
    def f(x):
        both = T.concat([x, T.sub(1.0, x)])
        return T.relu(T.min_reduce(both, axis=0)[0])

    (g,) = grad_of(f, [0.3])
    assert g[0] == pytest.approx(1.0)


def test_matmul_grad_small_case(rng):
    make, tol = OPS["matmul_2d"]
    inputs, fn = make(rng)
    assert directional_gradcheck(fn, inputs, rng, directions=5) <= tol


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    make, tol = OPS[name]
    for i in range(10):
        rng = np.random.default_rng([3, i])
        inputs, fn = make(rng)
        assert directional_gradcheck(fn, inputs, rng) <= tol


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractViolation):
        tape.backward(y, [x])


def test_unused_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.sum(x)
    gx, gz = tape.backward(y, [x, z])
    np.testing.assert_array_equal(gz, 0)
    np.testing.assert_array_equal(gx, 1)


def test_fanout_accumulates():
    (g,) = grad_of(lambda x: T.sum(T.add(T.mul(x, x), T.mul(x, 3.0))), [2.0])
    assert g[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            T.sum(T.mul(x, x))
    assert len(tape) == 0


def test_check_finite_rejects_nan():
    with pytest.raises(RejectedInput):
        T.check_finite(Tensor(np.array([1.0, np.nan])))


def test_sum_of_f32_uses_wide_accumulator():
    x = np.full(10_000_001, 0.1, np.float32)
    got = float(T.sum(Tensor(x)).data)
    assert got == pytest.approx(np.sum(x, dtype=np.float64), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 9)),
              elements=st.floats(-10, 10)),
       st.integers(0, 8))
def test_stable_gemm_rows_do_not_depend_on_batch(a, cut):
    b = np.random.default_rng(0).standard_normal((a.shape[1], 5))
    full = _stable_gemm(a, b)
    cut = min(cut, a.shape[0] - 1)
    part = _stable_gemm(a[cut:cut + 1], b)
    assert np.array_equal(full[cut:cut + 1], part)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)))
def test_min_reduce_matches_numpy(x):
    v, i = T.min_reduce(Tensor(x))
    assert float(v.data) == x.min()
    assert int(i) == int(np.argmin(x))


# --------------------------------------------------------------------------
# Adam


def reference_adam(p, g_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam in float64, one scalar at a time."""
    p = np.array(p, np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, steps + 1):
        g = g_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adam_first_step_is_minus_lr():
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": np.ones(4)}, AdamState.for_params(p), 1e-4)
    assert np.all(np.abs(p["w"] + 1e-4) <= 1e-8 * 1e-4 + 1e-12)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.arange(5.0)}
    st_ = AdamState.for_params(p)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(5)}, st_, 1e-2)
    np.testing.assert_array_equal(p["w"], np.arange(5.0))


def test_adam_scalar_convergence():
    p = {"x": np.zeros(1)}
    st_ = AdamState.for_params(p)
    for _ in range(200):
        adam_step(p, {"x": 2 * (p["x"] - 2)}, st_, 0.1)
    assert abs(p["x"][0] - 2) <= 0.05


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(5)
    target = rng.standard_normal(7)
    g_fn = lambda q: 2 * (q - target) + np.sin(q)  # noqa: E731
    p = {"w": np.zeros(7)}
    st_ = AdamState.for_params(p)
    for _ in range(50):
        adam_step(p, {"w": g_fn(p["w"])}, st_, 3e-2)
    np.testing.assert_allclose(p["w"], reference_adam(np.zeros(7), g_fn, 3e-2, 50), rtol=1e-10, atol=1e-12)


def test_adam_float32_tracks_float64():
    rng = np.random.default_rng(6)
    g = rng.standard_normal((20, 3))
    p32 = {"w": np.zeros((20, 3), np.float32)}
    p64 = {"w": np.zeros((20, 3))}
    s32, s64 = AdamState.for_params(p32), AdamState.for_params(p64)
    for _ in range(10):
        adam_step(p32, {"w": g.astype(np.float32)}, s32, 1e-3)
        adam_step(p64, {"w": g}, s64, 1e-3)
    np.testing.assert_allclose(p32["w"], p64["w"], rtol=1e-4, atol=1e-8)


def test_adam_rejects_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ContractViolation):
        adam_step(p, {"w": np.zeros(4)}, AdamState.for_params(p), 1e-3)


def test_adam_updates_tensor_storage_in_place():
    w = Tensor(np.zeros(3, np.float32), requires_grad=True)
    buf = w.data
    adam_step({"w": w}, {"w": np.ones(3, np.float32)}, AdamState.for_params({"w": w}), 1e-2)
    assert w.data is buf and np.all(buf < 0)
