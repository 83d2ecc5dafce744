"""Finite-difference gradient checking and small fixtures shared by tests."""
from __future__ import annotations

import numpy as np

from sdaanet.data import Episode, Sample
from sdaanet.tensor import Tensor


def numeric_grad(f, arrays, index, eps=1e-3):
    """Central differences of scalar f(*arrays) w.r.t. arrays[index] (float64)."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(*arrays)
        x[i] = old - eps
        lo = f(*arrays)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    """Norm-relative error |a - n| / (|n| + 1e-8)."""
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + 1e-8))


def check_op(op, arrays, seed=0, eps=1e-3, wrt=None):
    """Largest relative gradient error of ``op`` over its differentiable inputs.

    The output is contracted with fixed random weights so every output
    element contributes to the checked scalar.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    # separate stream: a probe drawn like the inputs can sit on a stationary point
    rng = np.random.default_rng([seed, 0x5EED])
    probe = {}

    def scalar(*arrs):
        out = op(*[Tensor(a) for a in arrs]).data
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape)
        return float((out * probe["w"]).sum())

    scalar(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    (out * Tensor(probe["w"])).sum().backward()
    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, rel_error(tensors[i].grad, num))
    return worst


def binary_mask(rng, n, h, w, p=0.5):
    m = (rng.uniform(size=(n, 1, h, w)) < p).astype(np.float64)
    m.reshape(n, -1)[:, 0] = 1.0  # never empty
    return m


def toy_episode(rng, k=1, size=8, class_id=0, seed=0):
    """Random-image episode at an arbitrary size, bypassing the renderer."""

    def sample():
        img = rng.uniform(size=(1, 3, size, size)).astype(np.float32)
        mask = (rng.uniform(size=(1, 1, size, size)) < 0.4).astype(np.float32)
        mask[0, 0, 0, 0] = 1.0
        return Sample(image=img, mask=mask, class_id=class_id)

    return Episode(support=[sample() for _ in range(k)], query=sample(), class_id=class_id, seed=seed)


def store_of(named):
    """ParamStore wrapping existing tensors (keeps gradient-check inputs live)."""
    from sdaanet.params import ParamStore

    store = ParamStore(np.float64)
    for name, t in named.items():
        store._params[name] = t
    return store
