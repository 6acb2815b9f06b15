import numpy as np
import pytest

from fedgid import model as M
from fedgid.datagen import DatasetSpec, generate_dataset


@pytest.fixture(scope="session")
def small_train():
    return generate_dataset(DatasetSpec(seed=11, num_samples=400))


@pytest.fixture(scope="session")
def small_test():
    return generate_dataset(DatasetSpec(split="ood_test", seed=12, num_samples=200))


@pytest.fixture
def tiny_params():
    # nonzero biases so that ReLU kinks are not hit systematically
    p = M.init_params(3, M.TINY_ARCH)
    rng = np.random.default_rng(4)
    t = dict(p.tensors)
    for k in ("conv_b", "fc1_b", "fc2_b"):
        t[k] = rng.normal(0, 0.1, size=t[k].shape)
    return M.ModelParams(p.arch, t)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def numeric_grad(loss_fn, params: M.ModelParams, eps: float = 1e-6):
    """Central differences of ``loss_fn(params)`` for every parameter entry."""
    out = {}
    for name, t in params.tensors.items():
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            plus = {k: v.copy() for k, v in params.tensors.items()}
            minus = {k: v.copy() for k, v in params.tensors.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (loss_fn(M.ModelParams(params.arch, plus))
                      - loss_fn(M.ModelParams(params.arch, minus))) / (2 * eps)
        out[name] = g
    return out
