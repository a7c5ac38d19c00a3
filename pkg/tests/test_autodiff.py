import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_inr import autodiff as ad
from moe_inr.autodiff import Adam, AdamState, Tensor


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


# -- forward examples --------------------------------------------------------

def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(out.value, [[0.25] * 4], atol=1e-15)


@pytest.mark.parametrize("shape", [(3,), (2, 5), (4, 1, 3)])
def test_sin_of_zeros(shape):
    out = ad.sin(Tensor(np.zeros(shape)))
    assert out.shape == shape
    assert np.all(out.value == 0.0)


def test_matmul_all_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    np.testing.assert_array_equal(out.value, np.full((2, 4), 3.0))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op"):
        ad.apply("cosh", Tensor(np.zeros(2)))


@pytest.mark.parametrize("kind,a,b", [
    ("matmul", (2, 3), (4, 2)),
    ("add", (2, 3), (3, 2)),
    ("multiply", (5,), (4,)),
])
def test_shape_mismatch(kind, a, b):
    with pytest.raises(ad.ShapeError):
        ad.apply(kind, Tensor(np.ones(a)), Tensor(np.ones(b)))


def test_concat_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])


def test_nan_detected_during_evaluation():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_shape_matches_value_count():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert int(np.prod(t.shape)) == t.value.size
    assert Tensor(3.0).shape == (1,)


def test_log_floor():
    out = ad.log(Tensor(np.array([0.0])))
    assert out.value[0] == pytest.approx(math.log(ad.LOG_FLOOR))


# -- backward examples -------------------------------------------------------

def test_backward_sum_of_squares():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    grads = ad.backward(ad.square(w).sum())
    np.testing.assert_array_equal(grads[w], [2.0, 4.0])


def test_backward_mean_of_constant_gives_zero_for_params():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = Tensor(np.full(4, 2.5)).mean()
    grads = ad.backward(loss, [w])
    np.testing.assert_array_equal(grads[w], np.zeros(3))


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(w * 2.0)


def test_unreachable_parameter_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = ad.backward((a * 3.0).sum(), [a, b])
    np.testing.assert_array_equal(grads[b], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[a], [3.0, 3.0])


def test_gradient_shapes_match_values():
    rng = np.random.default_rng(1)
    w = param(rng, 3, 4)
    b = param(rng, 4)
    x = Tensor(rng.normal(size=(5, 3)))
    grads = ad.backward(ad.sin(x @ w + b).mean())
    assert grads[w].shape == w.shape
    assert grads[b].shape == b.shape


def test_two_layer_sine_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(-1, 1, size=(6, 2)))
    w1, b1 = param(rng, 2, 8, scale=0.5), param(rng, 8, scale=0.1)
    w2, b2 = param(rng, 8, 3, scale=0.2), param(rng, 3, scale=0.1)

    def f():
        h = ad.sin((x @ w1 + b1) * 30.0)
        return ad.square(ad.sin(h @ w2 + b2)).mean()

    assert ad.finite_diff_check(f, [w1, b1, w2, b2]) < 1e-4


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        out = w * 2.0
    assert not out.requires_grad
    assert out._backward is None


# -- finite_diff_check examples ----------------------------------------------

def test_fd_check_square():
    w = Tensor(np.array([3.0]), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.square(w).sum(), [w], step=1e-5) < 1e-8


def test_fd_check_siren_frequency():
    w = Tensor(np.array([0.1]), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.sin(w * 30.0).sum(), [w]) < 1e-5
    # analytic derivative 30 cos(30 w)
    g = ad.backward(ad.sin(w * 30.0).sum())[w]
    assert g[0] == pytest.approx(30.0 * math.cos(3.0), rel=1e-12)


def test_fd_check_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    logits = param(rng, 5, 4)
    onehot = np.eye(4)[rng.integers(0, 4, size=5)]

    def f():
        return (ad.log(ad.softmax(logits)) * onehot).sum(axis=-1).mean() * -1.0

    assert ad.finite_diff_check(f, [logits]) < 1e-5


def test_fd_check_rejects_non_finite():
    w = Tensor(np.array([1.0]), requires_grad=True)

    def f():
        if w.value[0] > 1.0:
            return Tensor(np.array([np.inf]))
        return ad.square(w).sum()

    with ad.finite_checks(False), pytest.raises(ad.NonFiniteError):
        ad.finite_diff_check(f, [w])


def test_fd_check_rejects_bad_step():
    w = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda: w.sum(), [w], step=0.0)


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    ad.adam_step([w], {w: np.zeros(2)}, state)
    np.testing.assert_array_equal(w.value, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_lr_times_sign():
    w = Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)
    g = np.array([0.3, -5.0, 1e-2])
    state = AdamState(lr=1e-3)
    ad.adam_step([w], {w: g}, state)
    # m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(w.value, expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(w.value), 1e-3, rtol=1e-5)


def test_adam_decay_closed_form():
    state = AdamState(lr=1.0, decay=0.9999, step=10000)
    assert state.current_lr() == pytest.approx(math.exp(10000 * math.log(0.9999)), rel=1e-12)
    assert state.current_lr() == pytest.approx(0.3679, abs=1e-4)


def test_adam_lr_decays_per_step():
    w = Tensor(np.ones(1), requires_grad=True)
    opt = Adam([w], lr=0.5, decay=0.9)
    for t in range(5):
        assert opt.lr == pytest.approx(0.5 * 0.9 ** t)
        opt.step({w: np.ones(1)})


def test_adam_rejects_non_finite_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step([w], {w: np.array([1.0, np.nan])}, AdamState())


def test_adam_moments_match_param_shapes():
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    state = AdamState()
    ad.adam_step([w], {w: np.ones((3, 2))}, state)
    assert state.m[id(w)].shape == (3, 2)
    assert state.v[id(w)].shape == (3, 2)


def test_adam_only_subset():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([a, b], lr=0.1)
    before = b.value.tobytes()
    opt.step({a: np.ones(2), b: np.ones(2)}, only=[a])
    assert b.value.tobytes() == before
    assert np.all(a.value < 1.0)


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        Adam([], lr=-1.0)
    with pytest.raises(ValueError):
        Adam([], lr=1.0, decay=1.5)


# -- properties --------------------------------------------------------------

def _unary_case(kind, rng):
    a = param(rng, 3, 4)
    if kind == "log":
        a.value[...] = rng.uniform(0.5, 2.0, size=a.shape)
    if kind == "abs":
        a.value[...] = np.where(np.abs(a.value) < 0.1, 0.5, a.value)
    op = {"square": ad.square, "sin": ad.sin, "softplus": ad.softplus, "exp": ad.exp, "log": ad.log,
          "abs": ad.absolute, "softmax": ad.softmax}[kind]
    w = rng.normal(size=(3, 4))
    return [a], lambda: (op(a) * w).sum()


def _binary_case(kind, rng):
    if kind == "matmul":
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        w = rng.normal(size=(3, 2))
        return [a, b], lambda: (ad.matmul(a, b) * w).sum()
    a, b = param(rng, 3, 4), param(rng, 4)   # broadcast over the batch
    op = {"add": lambda: a + b, "multiply": lambda: a * b, "subtract": lambda: a - b}[kind]
    w = rng.normal(size=(3, 4))
    return [a, b], lambda: (op() * w).sum()


def _reduce_case(kind, rng):
    a = param(rng, 3, 4)
    w = rng.normal(size=4)
    if kind == "concat":
        b = param(rng, 3, 2)
        w2 = rng.normal(size=6)
        return [a, b], lambda: (ad.concat([a, b]) * w2).sum()
    red = {"mean": lambda: a.mean(axis=0), "sum": lambda: a.sum(axis=0)}[kind]
    return [a], lambda: (red() * w).sum()


OP_KINDS = ["matmul", "add", "multiply", "subtract", "square", "sin", "softplus", "exp", "log", "abs",
            "concat", "softmax", "mean", "sum"]


def op_case(kind, seed):
    rng = np.random.default_rng(seed)
    if kind in ("matmul", "add", "multiply", "subtract"):
        return _binary_case(kind, rng)
    if kind in ("concat", "mean", "sum"):
        return _reduce_case(kind, rng)
    return _unary_case(kind, rng)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(OP_KINDS), seed=st.integers(0, 2 ** 31))
def test_every_op_matches_finite_differences(kind, seed):
    params, f = op_case(kind, seed)
    assert ad.finite_diff_check(f, params) < 1e-4


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.01, 50.0))
def test_softmax_rows_sum_to_one(seed, scale):
    x = np.random.default_rng(seed).normal(0, scale, size=(7, 5))
    q = ad.softmax(Tensor(x)).value
    np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(q > 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    w = param(rng, 4, 3)
    x = Tensor(rng.normal(size=(5, 4)))

    def l1():
        return ad.square(x @ w).mean()

    def l2():
        return ad.sin(x @ w).sum()

    g_sum = ad.backward(l1() + l2())[w]
    g_sep = ad.backward(l1())[w] + ad.backward(l2())[w]
    np.testing.assert_allclose(g_sum, g_sep, atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), steps=st.integers(1, 30))
def test_adam_zero_gradients_identity(seed, steps):
    rng = np.random.default_rng(seed)
    w = param(rng, 3, 2)
    before = w.value.copy()
    opt = Adam([w], lr=1e-2, decay=0.99)
    for _ in range(steps):
        opt.step({w: np.zeros_like(w.value)})
    np.testing.assert_array_equal(w.value, before)
