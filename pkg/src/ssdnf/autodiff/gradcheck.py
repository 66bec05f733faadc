"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, sum_


def numerical_grad(f: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                   wrt: int, h: float, max_entries: int | None = None,
                   rng: np.random.Generator | None = None):
    """Central differences of scalar ``f`` w.r.t. ``arrays[wrt]``.

    Returns ``(flat_indices, values)``; with ``max_entries`` only a random
    subset of entries is probed.
    """
    base = [np.array(a, copy=True) for a in arrays]
    x = base[wrt]
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    vals = np.empty(len(idx), dtype=np.float64)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f(base)
        flat[i] = old - h
        fm = f(base)
        flat[i] = old
        vals[k] = (fp - fm) / (2 * h)
    return idx, vals


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``max|a - n| / max|n|`` (absolute when ``n`` is ~0)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    return diff / scale if scale > 1e-12 else diff


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
                    max_entries: int | None = 64, seed: int = 0, dtype=np.float64) -> list[float]:
    """Compare tape gradients of ``fn(*tensors)`` against central differences.

    Non-scalar outputs are contracted with a fixed random projection. Returns
    one relative error per input.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=dtype) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    proj = None if probe.size == 1 else rng.standard_normal(probe.shape).astype(dtype)

    def scalar(out: Tensor) -> Tensor:
        return out if proj is None else sum_(out * Tensor(proj))

    def f(arrs):
        return float(scalar(fn(*[Tensor(a) for a in arrs])).data.reshape(-1)[0])

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = scalar(fn(*ts))
    grads = tape.backward(loss)
    errors = []
    for i, t in enumerate(ts):
        idx, num = numerical_grad(f, arrays, i, h, max_entries, rng)
        errors.append(relative_error(grads[t].reshape(-1)[idx], num))
    return errors
