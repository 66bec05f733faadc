"""Bias-corrected Adam, for dense parameters and for row-addressed code banks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalError(FloatingPointError):
    """A gradient or loss went non-finite; ``term`` names the offending quantity."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite values in {term}" + (f": {detail}" if detail else ""))


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(name, f"{bad} of {np.size(arr)} entries")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    lr_mult: float = 1.0

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def _update(p, g, m, v, t, s: AdamState, lr):
    # in-place on p, m, v; t may be an array broadcastable against p (row-wise steps)
    b1, b2 = s.beta1, s.beta2
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    upd = (lr / bc1) * m / (np.sqrt(v / bc2) + s.eps)
    p -= upd.astype(p.dtype, copy=False)


def adam_step(params, grads, state: AdamState, names=None) -> None:
    """One Adam step on ``params`` (Tensors, updated in place); advances ``state``."""
    if len(params) != len(grads):
        raise ValueError("adam_step: params and grads are misaligned")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        check_finite(names[i] if names else f"grad[{i}]", g)
    state.step += 1
    lr = state.lr * state.lr_mult
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _update(p.data, g.astype(p.data.dtype, copy=False), m, v, state.step, state, lr)


@dataclass
class RowAdam:
    """Adam over rows of a parameter bank with one step counter per row.

    Used for per-scene latent codes: each scene keeps its own moments and its
    own bias-correction clock, and only the rows of the current batch move.
    """
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-2
    lr_mult: float = 1.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, bank: np.ndarray, **kw) -> "RowAdam":
        return cls(m=np.zeros_like(bank), v=np.zeros_like(bank),
                   steps=np.zeros(bank.shape[0], dtype=np.int64), **kw)

    def step(self, bank: np.ndarray, rows: np.ndarray, grad: np.ndarray, name: str = "codes") -> None:
        rows = np.asarray(rows, dtype=np.int64)
        if len(np.unique(rows)) != len(rows):
            raise ValueError("RowAdam.step: duplicate rows in batch")
        check_finite(name, grad)
        self.steps[rows] += 1
        t = self.steps[rows].reshape((-1,) + (1,) * (bank.ndim - 1)).astype(np.float64)
        p, m, v = bank[rows], self.m[rows], self.v[rows]
        _update(p, grad.astype(bank.dtype, copy=False), m, v, t, self, self.lr * self.lr_mult)
        bank[rows], self.m[rows], self.v[rows] = p, m, v

    def reset(self) -> None:
        self.m[...] = 0
        self.v[...] = 0
        self.steps[...] = 0
