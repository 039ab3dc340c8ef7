import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spade.errors import GradientError, ShapeError
from spade.optim import AdamState, adam_step
from spade.tensor import (
    Graph, Tensor, backward, broadcast_to, concat, conv1d_causal, gather_time, matmul,
    pinball, relu, softmax_masked,
)

from conftest import check_gradients


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def loop_conv(x, w, dilation):
    """Sliding-window oracle: tap k-1 is the current step."""
    c, t = x.shape
    o, _, k = w.shape
    out = np.zeros((o, t))
    for oc in range(o):
        for tt in range(t):
            for ic in range(c):
                for j in range(k):
                    src = tt - (k - 1 - j) * dilation
                    if src >= 0:
                        out[oc, tt] += w[oc, ic, j] * x[ic, src]
    return out


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, -2.0, 3.0], [4.0, 5.0, 6.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_hand_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    expected = loop_matmul(a, b)
    assert expected.tolist() == [[3.0], [7.0]]
    assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_zero_annihilates(rng):
    a = rng.normal(size=(3, 4))
    assert np.array_equal(matmul(Tensor(a), Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 2\]"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_random_matches_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)


# --- conv -------------------------------------------------------------------

def test_conv_unit_kernel_window_sums():
    x = Tensor([[1.0, 2.0, 3.0]])
    k = Tensor(np.ones((1, 1, 2)))
    assert conv1d_causal(x, k, 1).data.tolist() == [[1.0, 3.0, 5.0]]
    x4 = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert conv1d_causal(Tensor(x4), k, 2).data.tolist() == [[1.0, 2.0, 4.0, 6.0]]
    assert loop_conv(x4, np.ones((1, 1, 2)), 2).tolist() == [[1.0, 2.0, 4.0, 6.0]]


@pytest.mark.parametrize("dilation", [1, 2, 5])
def test_conv_identity_kernel(rng, dilation):
    x = rng.normal(size=(1, 7))
    assert np.array_equal(conv1d_causal(Tensor(x), Tensor(np.ones((1, 1, 1))), dilation).data, x)


@pytest.mark.parametrize("dilation", [1, 2, 4, 8])
def test_conv_matches_loop_oracle(rng, dilation):
    x, w = rng.normal(size=(3, 12)), rng.normal(size=(2, 3, 3))
    np.testing.assert_allclose(conv1d_causal(Tensor(x), Tensor(w), dilation).data,
                               loop_conv(x, w, dilation), atol=1e-12)


def test_conv_batched_matches_unbatched(rng):
    x, w = rng.normal(size=(4, 2, 9)), rng.normal(size=(3, 2, 2))
    out = conv1d_causal(Tensor(x), Tensor(w), 2).data
    for b in range(4):
        np.testing.assert_allclose(out[b], loop_conv(x[b], w, 2), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv1d_causal(Tensor(np.ones((2, 5))), Tensor(np.ones((1, 3, 2))), 1)
    with pytest.raises(ShapeError):
        conv1d_causal(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 1, 2))), 0)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 19), st.integers(0, 10_000))
def test_conv_causality(dilation, t, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 20)), rng.normal(size=(3, 2, 3))
    base = conv1d_causal(Tensor(x), Tensor(w), dilation).data
    x2 = x.copy()
    x2[:, t] += rng.normal() + 3.0
    moved = conv1d_causal(Tensor(x2), Tensor(w), dilation).data
    assert np.array_equal(base[:, :t], moved[:, :t])


# --- relu / softmax ------------------------------------------------------------

def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.array_equal(relu(Tensor(-np.arange(1.0, 5.0))).data, np.zeros(4))
    pos = np.arange(1.0, 5.0)
    assert np.array_equal(relu(Tensor(pos)).data, pos)


def test_relu_gradient_gates():
    x = Tensor([-2.0, 3.0], requires_grad=True)
    backward(relu(x).sum())
    assert x.grad.tolist() == [0.0, 1.0]


def test_softmax_examples():
    assert softmax_masked(Tensor([0.0, 0.0]), [1, 1]).data.tolist() == [0.5, 0.5]
    assert softmax_masked(Tensor([5.0, 100.0]), [1, 0]).data.tolist() == [1.0, 0.0]
    assert softmax_masked(Tensor([0.0, 0.0]), [0, 0]).data.tolist() == [0.0, 0.0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=10, size=(5, 7))
    mask = (rng.random((5, 7)) < 0.5).astype(float)
    p = softmax_masked(Tensor(logits), mask).data
    assert np.all(p[mask == 0] == 0.0)
    sums = p.sum(axis=-1)
    live = mask.sum(axis=-1) > 0
    np.testing.assert_allclose(sums[live], 1.0, atol=1e-12)
    assert np.all(sums[~live] == 0.0)


# --- backward ---------------------------------------------------------------

def test_backward_sum_is_ones():
    p = Tensor(np.zeros((2, 3)), requires_grad=True)
    backward(p.sum())
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_half_square():
    p = Tensor([1.0, 2.0], requires_grad=True)
    backward((p * p).sum() * 0.5)
    assert p.grad.tolist() == [1.0, 2.0]


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError):
        backward(p * 2.0)


def test_graph_order_and_single_visit():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = relu(a * 3.0)
    c = (b + a).sum()
    g = Graph.trace(c)
    ids = [n.id for n in g.nodes]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    for node in g.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert parent.id < node.id
    backward(c, g)
    assert a.grad.tolist() == [4.0, 4.0]


def test_mlp_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    w1, b1 = rng.normal(size=(3, 6)), rng.normal(size=(6,))
    w2 = rng.normal(size=(6, 2))

    def build(w1, b1, w2):
        h = relu(matmul(Tensor(x), w1) + b1)
        return (matmul(h, w2) * matmul(h, w2)).sum()

    check_gradients(build, [w1, b1, w2], rtol=1e-4)


# --- finite-difference sweep over every differentiable op --------------------

def _ops(rng):
    m1, m2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    big = rng.normal(size=(4, 6))
    mask = (rng.random((4, 6)) < 0.6).astype(float)
    mask[0] = 0.0
    w = rng.normal(size=(3, 4))
    w_cat, w_gather = rng.normal(size=(4, 6)), rng.normal(size=(2, 3, 3))
    return {
        "add": (lambda a, b: ((a + b) * w[:, :1].sum()).sum(), [rng.normal(size=(4, 6)), rng.normal(size=(1, 6))]),
        "mul": (lambda a, b: (a * b).sum(), [rng.normal(size=(4, 6)), rng.normal(size=(4, 1))]),
        "neg_sub": (lambda a, b: ((a - b) * (a - b)).sum(), [rng.normal(size=(4, 6)), rng.normal(size=(6,))]),
        "matmul": (lambda a, b: (matmul(a, b) * matmul(a, b)).sum(), [m1, m2]),
        "batched_matmul": (lambda a, b: (matmul(a, b) * 1.5).sum() + (matmul(a, b) * matmul(a, b)).sum(),
                           [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
        "relu": (lambda a: (relu(a) * big).sum(), [rng.normal(size=(4, 6)) + 0.05]),
        "conv1d": (lambda x, k: (conv1d_causal(x, k, 2) * conv1d_causal(x, k, 2)).sum(),
                   [rng.normal(size=(2, 6)), rng.normal(size=(3, 2, 3))]),
        "softmax_masked": (lambda z: (softmax_masked(z, mask) * big).sum(), [rng.normal(size=(4, 6))]),
        "transpose_reshape": (lambda a: (a.transpose(1, 0).reshape(3, 8) * big.reshape(3, 8)).sum(),
                              [rng.normal(size=(4, 6))]),
        "concat": (lambda a, b: (concat([a, b], axis=1) * w_cat).sum(),
                   [rng.normal(size=(4, 2)), rng.normal(size=(4, 4))]),
        "broadcast": (lambda a: (broadcast_to(a, (4, 6)) * big).sum(), [rng.normal(size=(1, 6))]),
        "sum_axis": (lambda a: (a.sum(axis=1) * np.arange(4.0)).sum(), [rng.normal(size=(4, 6))]),
        "gather_time": (lambda a: (gather_time(a, np.array([[0, 2, 2], [1, 1, 3]])) * w_gather).sum(),
                        [rng.normal(size=(2, 4, 3))]),
        "pinball": (lambda p: pinball(p, big, np.array([0.1, 0.5, 0.9, 0.3, 0.7, 0.5])).sum(),
                    [big + rng.choice([-1.0, 1.0], size=(4, 6)) * (0.2 + rng.random((4, 6)))]),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients_finite_difference(name):
    for seed in range(3):
        build, arrays = _ops(np.random.default_rng(seed))[name]
        check_gradients(build, arrays, rtol=1e-4)


def test_pinball_values_and_kink_gradient():
    p = Tensor([0.0, 1.0, 7.0], requires_grad=True)
    loss = pinball(p, [1.0, 0.0, 7.0], [0.5, 0.9, 0.3])
    np.testing.assert_allclose(loss.data, [0.5, 0.1, 0.0])
    backward(loss.sum())
    np.testing.assert_allclose(p.grad, [-0.5, 0.1, 0.7])


def test_determinism(rng):
    x, w = rng.normal(size=(2, 3, 30)), rng.normal(size=(4, 3, 5))
    a = conv1d_causal(Tensor(x), Tensor(w), 4).data
    b = conv1d_causal(Tensor(x), Tensor(w), 4).data
    assert a.tobytes() == b.tobytes()


# --- adam -------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Tensor([1.0, -2.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state)
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = Tensor([0.5])
    state = AdamState.for_params([p], lr=0.001)
    adam_step([p], [np.ones(1)], state)
    # m_hat = 1, v_hat = 1 after bias correction
    np.testing.assert_allclose(0.5 - p.data[0], 0.001 / (1 + 1e-8), rtol=1e-12)


def test_adam_second_moment_accumulates():
    p = Tensor([0.0, 0.0])
    state = AdamState.for_params([p])
    assert np.all(state.v[0] == 0)
    for _ in range(2):
        adam_step([p], [np.array([0.3, -0.2])], state)
    assert np.all(state.v[0] > 0) and state.step == 2


def test_adam_shape_mismatch():
    p = Tensor([0.0, 0.0])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], AdamState.for_params([p]))
