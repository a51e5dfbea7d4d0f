"""Tensor library: gradients against finite differences, optimizer oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dentalmesh import autodiff as ad
from dentalmesh.errors import NonFiniteGradientError, ShapeError

from helpers import numeric_grad, relative_error

H = 1e-6
TOL = 1e-6


def check_grads(build_loss, arrays):
    """build_loss() -> (loss Tensor, params); FD over every element."""
    loss, params = build_loss()
    ad.backward(loss)
    for p, arr in zip(params, arrays):
        coords = list(range(arr.size))
        numeric = numeric_grad(lambda: float(build_loss()[0].data), arr, coords, H)
        analytic = p.gradient().ravel()[coords]
        assert relative_error(analytic, numeric) < TOL, p.name


def test_matmul_relu_chain_gradients(rng):
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 4))

    def build():
        wp = ad.Parameter(w, name="w")
        out = ad.relu(ad.Tensor(x) @ wp)
        return ad.reduce_sum(out * out), [wp]

    check_grads(build, [w])


def test_sigmoid_log_div_gradients(rng):
    a = rng.uniform(0.5, 2.0, size=(4, 4))
    b = rng.uniform(0.5, 2.0, size=(4, 4))

    def build():
        ap = ad.Parameter(a, name="a")
        bp = ad.Parameter(b, name="b")
        out = ad.log(ad.sigmoid(ap) / bp + 1.0)
        return ad.reduce_mean(out), [ap, bp]

    check_grads(build, [a, b])


def test_softmax_concat_gather_gradients(rng):
    a = rng.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 5, 1])

    def build():
        ap = ad.Parameter(a, name="a")
        soft = ad.softmax_rows(ad.concat([ap, ap * 2.0], axis=1))
        picked = ad.gather_rows(soft, idx)
        weights = np.linspace(1.0, 2.0, picked.data.size).reshape(picked.shape)
        return ad.reduce_sum(picked * weights), [ap]

    check_grads(build, [a])


def test_pooling_gradients(rng):
    # distinct entries keep the max unique, so FD stays valid at the argmax
    a = rng.permutation(24).astype(np.float64).reshape(6, 4) * 0.37

    def build():
        ap = ad.Parameter(a, name="a")
        pooled = ad.global_max_pool(ap)
        tiled = ad.broadcast_tile(pooled, 6)
        m = ad.max_over_axis(ad.reshape(ap * 1.5, (2, 3, 4)), axis=1)
        weights = np.arange(m.data.size, dtype=np.float64).reshape(m.shape)
        return ad.reduce_sum(tiled) + ad.reduce_sum(m * weights), [ap]

    check_grads(build, [a])


def test_batch_norm_gradients(rng):
    x = rng.normal(size=(7, 3))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)

    def build(training):
        def inner():
            state = ad.BatchNormState(3)
            state.mean = np.array([0.1, -0.2, 0.3])
            state.var = np.array([1.2, 0.8, 1.0])
            xp = ad.Parameter(x, name="x")
            gp = ad.Parameter(gamma, name="gamma")
            bp = ad.Parameter(beta, name="beta")
            out = ad.batch_norm(xp, gp, bp, state, training=training)
            weights = np.sin(np.arange(out.data.size)).reshape(out.shape)
            return ad.reduce_sum(out * weights), [xp, gp, bp]

        return inner

    check_grads(build(True), [x, gamma, beta])
    check_grads(build(False), [x, gamma, beta])


def test_neighbor_max_gradients(rng):
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(6, 2))
    nbrs = np.array([[0, 1, 2], [1, 0, 3], [2, 4, 0], [3, 1, 4], [4, 2, 3]])

    def build():
        xp = ad.Parameter(x, name="x")
        wp = ad.Parameter(w, name="w")

        def edge_fn(diff, center):
            return ad.concat([diff, center], axis=1) @ wp

        out = ad.neighbor_max(xp, nbrs, edge_fn)
        weights = np.cos(np.arange(out.data.size)).reshape(out.shape)
        return ad.reduce_sum(out * weights), [xp, wp]

    check_grads(build, [x, w])


def test_batch_norm_running_stats(rng):
    x = rng.normal(size=(8, 2)) * 2.0 + 1.0
    state = ad.BatchNormState(2)
    gamma = ad.Parameter(np.ones(2))
    beta = ad.Parameter(np.zeros(2))
    out = ad.batch_norm(ad.Tensor(x), gamma, beta, state, training=True)
    # batch statistics must normalize the output itself
    assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.data.var(axis=0), 1.0, atol=1e-4)
    # buffers blend in with momentum 0.1, variance stored unbiased
    assert np.allclose(state.mean, 0.1 * x.mean(axis=0))
    assert np.allclose(state.var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    assert state.steps == 1
    # inference mode uses the buffers and never touches them
    frozen_mean = state.mean.copy()
    expected = (x - state.mean) / np.sqrt(state.var + 1e-5)
    out_eval = ad.batch_norm(ad.Tensor(x), gamma, beta, state, training=False)
    assert np.allclose(out_eval.data, expected)
    assert np.array_equal(state.mean, frozen_mean)
    with pytest.raises(ShapeError):
        ad.batch_norm(ad.Tensor(x[:1]), gamma, beta, state, training=True)


def test_amsgrad_matches_hand_rolled_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [3.0, -1.0, 0.5, 0.5, -2.0]
    p = ad.Parameter(np.array([1.0]))
    opt = ad.AmsGrad([p], lr=lr, beta1=b1, beta2=b2, eps=eps)

    theta, m, v, vhat = 1.0, 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        vhat = max(vhat, v)
        denom = np.sqrt(vhat) / np.sqrt(1 - b2**t) + eps
        theta -= lr / (1 - b1**t) * m / denom
        assert p.data[0] == pytest.approx(theta, abs=1e-15)


def test_amsgrad_vhat_never_decreases(rng):
    p = ad.Parameter(rng.normal(size=(3,)))
    opt = ad.AmsGrad([p], lr=1e-2)
    prev = opt.v_hat[0].copy()
    for _ in range(30):
        p.grad = rng.normal(size=3) * rng.uniform(0.01, 5.0)
        opt.step()
        assert np.all(opt.v_hat[0] >= prev)
        prev = opt.v_hat[0].copy()


def test_amsgrad_rejects_non_finite_gradient():
    p = ad.Parameter(np.zeros(2), name="w1")
    q = ad.Parameter(np.zeros(2), name="w2")
    opt = ad.AmsGrad([p, q], lr=1e-2)
    p.grad = np.array([0.1, 0.2])
    q.grad = np.array([np.nan, 0.0])
    before = p.data.copy()
    with pytest.raises(NonFiniteGradientError, match="w2"):
        opt.step()
    # the step must not partially apply
    assert np.array_equal(p.data, before)
    assert opt.t == 0


def test_amsgrad_state_round_trip(rng):
    p = ad.Parameter(rng.normal(size=(2, 2)))
    opt = ad.AmsGrad([p], lr=1e-2)
    for _ in range(3):
        p.grad = rng.normal(size=(2, 2))
        opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    other = ad.AmsGrad([ad.Parameter(p.data.copy())], lr=1e-2)
    other.load_state_arrays(arrays)
    assert other.t == opt.t
    assert np.array_equal(other.v_hat[0], opt.v_hat[0])


def test_no_grad_blocks_graph_building():
    p = ad.Parameter(np.array([[1.0, 2.0]]))
    with ad.no_grad():
        out = ad.reduce_sum(p * 3.0)
    assert out._parents == ()
    ad.backward(out)
    assert p.grad is None
    assert ad.grad_enabled()


def test_backward_requires_scalar():
    p = ad.Parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.backward(p * 2.0)


def test_rank_cap():
    with pytest.raises(ShapeError):
        ad.Tensor(np.zeros((2, 2, 2, 2)))


def test_unreachable_parameter_has_zero_gradient():
    used = ad.Parameter(np.ones(3), name="used")
    unused = ad.Parameter(np.ones(3), name="unused")
    loss = ad.reduce_sum(used * 2.0)
    ad.backward(loss)
    assert np.array_equal(unused.gradient(), np.zeros(3))
    assert np.array_equal(used.gradient(), np.full(3, 2.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(n, c, seed):
    x = np.random.default_rng(seed).normal(size=(n, c)) * 10.0
    out = ad.softmax_rows(ad.Tensor(x))
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out.data > 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_forward_values_match_numpy(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, m))
    b = rng.normal(size=(m, n))
    assert np.allclose((ad.Tensor(a) @ ad.Tensor(b)).data, a @ b)
    assert np.allclose(ad.global_max_pool(ad.Tensor(a)).data, a.max(axis=0))
    assert np.allclose(ad.reduce_sum(ad.Tensor(a)).data, a.sum())
    assert np.allclose(ad.relu(ad.Tensor(a)).data, np.maximum(a, 0.0))
