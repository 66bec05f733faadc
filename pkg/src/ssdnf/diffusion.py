"""Variance-preserving latent diffusion over stacked triplane channels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class NoiseSchedule:
    """alpha[t], sigma[t] for t = 0..T, with alpha[0] = 1 and sigma[0] = 0."""
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha) - 1

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        return t

    def ddim_grid(self, steps: int) -> np.ndarray:
        """Descending timesteps evenly spaced over {1..T}, followed by 0."""
        if steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        return np.round(np.linspace(self.T, 0, steps + 1)).astype(np.int64)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha=np.sqrt(abar), sigma=np.sqrt(1.0 - abar))


def _coef(values: np.ndarray, t, ndim: int, dtype) -> np.ndarray:
    t = np.asarray(t)
    c = values[t].astype(dtype)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def perturb(x, t, eps, sched: NoiseSchedule) -> Tensor:
    """x_t = alpha_t x + sigma_t eps; ``t`` is a scalar or one step per leading item."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=x.dtype))
    if eps.shape != x.shape:
        raise ad.ShapeError("perturb", x.shape, eps.shape)
    t = sched.check_t(t)
    a = _coef(sched.alpha, t, x.ndim, x.dtype)
    s = _coef(sched.sigma, t, x.ndim, x.dtype)
    return x * Tensor(a) + eps * Tensor(s)


def snr_weight(t, omega: float, sched: NoiseSchedule):
    t = sched.check_t(t)
    if np.any(sched.sigma[t] <= 0):
        raise ValueError("SNR weight undefined at t=0 (infinite SNR)")
    return (sched.alpha[t] / sched.sigma[t]) ** (2.0 * omega)


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)


class UNet:
    """Two-level U-Net predicting v from stacked noisy triplanes [B, 3C, R, R].

    Residual blocks (GroupNorm, SiLU, 3x3 convs) with the time embedding added
    after the first conv; one stride-2 downsample and a mirrored nearest-
    upsample path with skip concatenation. The output conv is zero-initialized,
    so a fresh network predicts v = 0.
    """

    def __init__(self, in_ch: int, base: int = 32, mults=(1, 2), depth: int = 2,
                 temb_dim: int = 64, groups: int = 8, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype or ad.default_dtype()
        self.in_ch, self.base, self.mults, self.depth = in_ch, base, tuple(mults), depth
        self.temb_dim, self.groups = temb_dim, groups
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        tdim = temb_dim * 2
        self._linear("temb.0", temb_dim, tdim)
        self._linear("temb.1", tdim, tdim)
        self._conv("in", in_ch, base, 3)

        chans = [base]
        ch = base
        self.down_blocks = []
        for lvl, m in enumerate(self.mults):
            for d in range(depth):
                name = f"down.{lvl}.{d}"
                self._res(name, ch, base * m, tdim)
                self.down_blocks.append(name)
                ch = base * m
                chans.append(ch)
            if lvl < len(self.mults) - 1:
                self._conv(f"down.{lvl}.pool", ch, ch, 3)
                chans.append(ch)
        self._res("mid", ch, ch, tdim)
        self.up_blocks = []
        for lvl in reversed(range(len(self.mults))):
            out = base * self.mults[lvl]
            for d in range(depth + 1):
                name = f"up.{lvl}.{d}"
                self._res(name, ch + chans.pop(), out, tdim)
                self.up_blocks.append(name)
                ch = out
            if lvl > 0:
                self._conv(f"up.{lvl}.upsample", ch, ch, 3)
        self._norm("out.norm", ch)
        self._conv("out", ch, in_ch, 3, zero=True)
        del self._rng

    # -- parameter construction ------------------------------------------
    def _p(self, name, arr):
        self.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _linear(self, name, i, o, zero=False):
        w = np.zeros((i, o)) if zero else self._rng.standard_normal((i, o)) * np.sqrt(1.0 / i)
        self._p(name + ".w", w)
        self._p(name + ".b", np.zeros(o))

    def _conv(self, name, i, o, k, zero=False):
        fan = i * k * k
        w = np.zeros((o, i, k, k)) if zero else self._rng.standard_normal((o, i, k, k)) * np.sqrt(2.0 / fan)
        self._p(name + ".w", w)
        self._p(name + ".b", np.zeros(o))

    def _norm(self, name, ch):
        self._p(name + ".g", np.ones(ch))
        self._p(name + ".b", np.zeros(ch))

    def _res(self, name, i, o, tdim):
        self._norm(name + ".n1", i)
        self._conv(name + ".c1", i, o, 3)
        self._linear(name + ".t", tdim, o)
        self._norm(name + ".n2", o)
        self._conv(name + ".c2", o, o, 3, zero=True)
        if i != o:
            self._conv(name + ".skip", i, o, 1)

    # -- forward ------------------------------------------------------------
    def _gn(self, name, x):
        c = x.shape[1]
        g = self.groups if c % self.groups == 0 else 1
        return ad.group_norm(x, g, self.params[name + ".g"], self.params[name + ".b"])

    def _cv(self, name, x, stride=1):
        w = self.params[name + ".w"]
        pad = w.shape[-1] // 2
        return ad.conv2d(x, w, self.params[name + ".b"], stride=stride, padding=pad)

    def _block(self, name, x, temb):
        P = self.params
        h = self._cv(name + ".c1", ad.silu(self._gn(name + ".n1", x)))
        tproj = ad.linear(temb, P[name + ".t.w"], P[name + ".t.b"])
        h = h + ad.reshape(tproj, tproj.shape + (1, 1))
        h = self._cv(name + ".c2", ad.silu(self._gn(name + ".n2", h)))
        skip = self._cv(name + ".skip", x) if name + ".skip.w" in P else x
        return skip + h

    def __call__(self, x: Tensor, t) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ad.ShapeError("unet", x.shape, (None, self.in_ch, None, None))
        levels = len(self.mults)
        if x.shape[2] % (2 ** levels) or x.shape[3] % (2 ** levels):
            raise ad.ShapeError("unet (spatial size must divide 2^levels)", x.shape)
        P = self.params
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        emb = Tensor(timestep_embedding(t, self.temb_dim, x.dtype))
        temb = ad.linear(ad.silu(ad.linear(emb, P["temb.0.w"], P["temb.0.b"])), P["temb.1.w"], P["temb.1.b"])
        temb = ad.silu(temb)

        h = self._cv("in", x)
        hs = [h]
        for lvl in range(levels):
            for d in range(self.depth):
                h = self._block(f"down.{lvl}.{d}", h, temb)
                hs.append(h)
            if lvl < levels - 1:
                h = self._cv(f"down.{lvl}.pool", h, stride=2)
                hs.append(h)
        h = self._block("mid", h, temb)
        for lvl in reversed(range(levels)):
            for d in range(self.depth + 1):
                h = self._block(f"up.{lvl}.{d}", ad.concat([h, hs.pop()], axis=1), temb)
            if lvl > 0:
                h = self._cv(f"up.{lvl}.upsample", ad.upsample_nearest2x(h))
        return self._cv("out", ad.silu(self._gn("out.norm", h)))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ad.ShapeError(f"unet.load_state[{k}]", state[k].shape, v.shape)
            v.data = np.array(state[k], dtype=v.dtype)


@dataclass
class Denoised:
    x0: Tensor    # x-hat
    eps: Tensor | None   # eps-hat (None when sigma == 0)
    v: Tensor     # v-hat


def x0_from_v(x_t, v, alpha, sigma):
    return x_t * alpha - v * sigma


def eps_from_x0(x_t, x0, alpha, sigma):
    return (x_t - x0 * alpha) / sigma


def denoise(net: UNet, x_t: Tensor, t, sched: NoiseSchedule, want_eps: bool = True) -> Denoised:
    """Run the v-predictor on codes shaped [B, 3, C, R, R] and convert to x-hat / eps-hat."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
    t = sched.check_t(np.broadcast_to(np.asarray(t), (x_t.shape[0],)))
    if np.any(t < 1):
        raise ValueError("denoise requires t >= 1")
    b = x_t.shape[0]
    stacked = ad.reshape(x_t, (b, -1) + x_t.shape[-2:])
    v = ad.reshape(net(stacked, t), x_t.shape)
    a = Tensor(_coef(sched.alpha, t, x_t.ndim, x_t.dtype))
    s_arr = _coef(sched.sigma, t, x_t.ndim, x_t.dtype)
    x0 = x0_from_v(x_t, v, a, Tensor(s_arr))
    eps = None
    if want_eps:
        if np.any(s_arr == 0):
            raise ValueError("eps-hat undefined where sigma == 0")
        eps = eps_from_x0(x_t, x0, a, Tensor(s_arr))
    return Denoised(x0=x0, eps=eps, v=v)


def draw_noise(rng: np.random.Generator, shape, T: int, dtype=None):
    """One timestep in {1..T} and one Gaussian noise tensor per leading item."""
    t = rng.integers(1, T + 1, size=shape[0])
    eps = rng.standard_normal(shape).astype(dtype or ad.default_dtype())
    return t, eps


def diffusion_loss(net: UNet, codes: Tensor, sched: NoiseSchedule, omega: float = 0.5,
                   rng: np.random.Generator | None = None, t=None, eps=None) -> Tensor:
    """Mean over scenes of 1/2 w(t) ||x-hat(x_t, t) - x||^2, differentiable in net and codes.

    Either pass ``rng`` or explicit ``t`` / ``eps`` draws.
    """
    codes = codes if isinstance(codes, Tensor) else Tensor(np.asarray(codes))
    if codes.shape[0] < 1:
        raise ValueError("diffusion_loss needs at least one code")
    if t is None or eps is None:
        t, eps = draw_noise(rng, codes.shape, sched.T, codes.dtype)
    t = np.asarray(t)
    x_t = perturb(codes, t, eps, sched)
    den = denoise(net, x_t, t, sched, want_eps=False)
    err = den.x0 - codes
    w = snr_weight(t, omega, sched).astype(codes.dtype)
    per = (err * err).sum(axis=tuple(range(1, codes.ndim))) * 0.5
    return (per * Tensor(w)).mean()
