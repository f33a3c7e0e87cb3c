import numpy as np
import pytest
import torch

from hilogcd.synthdata import Dataset, GenConfig, make_dataset


@pytest.fixture(autouse=True)
def _double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def small_dataset():
    manifest, images = make_dataset(GenConfig(K=4, n_per_class_per_domain=8, image_shape=(3, 16, 16), seed=3))
    return Dataset(manifest, images)


@pytest.fixture(scope="session")
def glyph_dataset():
    manifest, images = make_dataset(GenConfig(n_per_class_per_domain=16, seed=7))
    return Dataset(manifest, images)


def unit_rows(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)


def fd_check(fn, inputs, probes=10, h=1e-6, seed=0):
    """Central finite differences along random directions; returns the worst relative error.

    ``fn`` maps the list of leaf tensors to a scalar.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(probes):
        dirs = [torch.randn(x.shape, generator=g, dtype=x.dtype) for x in leaves]
        analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
        with torch.no_grad():
            plus = float(fn(*[x + h * d for x, d in zip(leaves, dirs)]))
            minus = float(fn(*[x - h * d for x, d in zip(leaves, dirs)]))
        numeric = (plus - minus) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def np_softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
