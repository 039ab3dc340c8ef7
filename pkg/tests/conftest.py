import numpy as np
import pytest

from spade.tensor import Tensor, backward


def numerical_grad(f, arrays, index, eps=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    out = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][i] += eps
        minus[index][i] -= eps
        out[i] = (f(*plus) - f(*minus)) / (2 * eps)
    return out


def analytic_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via autodiff."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*ts)
    backward(loss)
    return [t.grad for t in ts]


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_gradients(build, arrays, rtol=1e-4, eps=1e-5):
    """Assert autodiff matches central differences for every input."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(build, arrays)

    def scalar(*xs):
        return build(*[Tensor(x) for x in xs]).item()

    worst = 0.0
    for i in range(len(arrays)):
        num = numerical_grad(scalar, arrays, i, eps)
        err = rel_error(grads[i], num)
        worst = max(worst, err)
        assert err < rtol, f"input {i}: relative error {err:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


from spade.config import ModelConfig
from spade.data import SeriesRecord, make_batch

TOY_HORIZONS = ((1, 1), (2, 1), (1, 3))


def toy_config(**kw):
    base = dict(horizons=TOY_HORIZONS, context_length=8, conv_layers=3, conv_filters=3, kernel_size=3,
                static_width=4, future_width=5, agnostic_width=6, specific_width=4,
                attention_width=8, attention_heads=4)
    base.update(kw)
    return ModelConfig(**base)


def toy_records(n=2, t=20, seed=0, peaks=((5, 12), (3, 9, 15))):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        d = np.zeros(t)
        d[list(peaks[i % len(peaks)])] = 1.0
        demand = 10 + 3 * np.sin(np.arange(t) / 2.0 + i) + rng.random(t) + 8 * d
        out.append(SeriesRecord(f"s{i}", demand, d, horizons=TOY_HORIZONS,
                                covariates=(np.arange(t) % 12 / 12.0)[None, :]))
    return out


def toy_batch(n=2, t=20, seed=0, split="all", **kw):
    return make_batch(toy_records(n, t, seed, **kw), split, 1, 0)
