import numpy as np
import pytest

from gmvae_osr.model import ModelConfig, init_params
from gmvae_osr.tensor import Tape


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arrays``."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def autodiff(f_tensor, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        root = f_tensor()
    tape.backward(root)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def assert_grads_close(analytic, numeric, rel=1e-4, abs_tol=1e-6):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        ok = (err <= abs_tol) | (err <= rel * np.maximum(np.abs(a), np.abs(n)))
        assert ok.all(), f"max abs err {err.max():.3e}"


def tiny_config(C=2, K=(2, 1), dim_x=6, dim_z=2, dim_w=2):
    return ModelConfig(C, K, dim_x, dim_z=dim_z, dim_w=dim_w, hidden=(8, 8),
                       beta_hidden=(8,), w_reduce=4)


@pytest.fixture
def tiny_params():
    return init_params(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
