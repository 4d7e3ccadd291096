import numpy as np
import pytest

from fsrwkv import engine


def leaf(rng, shape, scale=1.0, dtype=np.float64):
    """Random float64 leaf tensor with gradients enabled."""
    data = rng.standard_normal(shape).astype(dtype) * scale
    return engine.Tensor(data, requires_grad=True)


def _check_indices(shape, max_indices):
    """All indices, or a deterministic evenly spaced subset for large tensors."""
    size = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if max_indices is None or size <= max_indices:
        return list(np.ndindex(shape))
    flat = np.unique(np.linspace(0, size - 1, max_indices).astype(np.int64))
    return [np.unravel_index(i, shape) for i in flat]


def numeric_grad(build, t, h=1e-4, max_indices=None):
    """Central-difference gradient of the scalar build() w.r.t. tensor t.

    Returns (numeric, mask): entries of ``numeric`` outside ``mask`` were not
    evaluated (index subsampling for large tensors).
    """
    num = np.zeros_like(t.data)
    mask = np.zeros(t.data.shape, dtype=bool)
    for idx in _check_indices(t.data.shape, max_indices):
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = build().item()
        t.data[idx] = orig - h
        fm = build().item()
        t.data[idx] = orig
        num[idx] = (fp - fm) / (2.0 * h)
        mask[idx] = True
    return num, mask


def gradcheck(build, leaves, h=1e-4, rtol=1e-3, atol=1e-6, max_indices=None):
    """Compare autodiff gradients of scalar build() against central differences.

    build() must reconstruct the graph from the current leaf data on every
    call.  Gradients are checked elementwise: |a - n| <= atol + rtol * max(|a|, |n|).
    With max_indices set, tensors larger than that only have an evenly spaced
    subset of entries checked.
    """
    for t in leaves:
        t.zero_grad()
    build().backward()
    for t in leaves:
        assert t.grad is not None, "leaf received no gradient"
        analytic = np.array(t.grad, dtype=np.float64, copy=True)
        num, mask = numeric_grad(build, t, h=h, max_indices=max_indices)
        err = np.abs(analytic - num)
        tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(num))
        bad = (err > tol) & mask
        worst = float((err - tol)[mask].max())
        assert not bad.any(), f"gradient mismatch, worst excess {worst:.3e}\nanalytic:\n{analytic}\nnumeric:\n{num}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
