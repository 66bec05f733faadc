"""Single-stage joint training of scene codes, NeRF decoder and diffusion prior."""
from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, RowAdam, Tape, Tensor, adam_step
from .diffusion import NoiseSchedule, UNet, diffusion_loss, draw_noise, make_linear_schedule
from .field import Decoder, Observations, make_ray_batch, rendering_loss, tanh_map, tanh_unmap

log = logging.getLogger(__name__)


# -- weighting -----------------------------------------------------------------

def rend_weight(n_views: float, c_rend: float) -> float:
    if n_views <= 0:
        raise ValueError("n_views must be positive")
    return c_rend * -np.expm1(-0.1 * n_views) / n_views


@dataclass
class WeightBalancer:
    c_rend: float
    c_diff: float
    dim_x: int
    ema_decay: float = 0.999
    lambda_reg: float = 0.003
    ema_floor: float = 0.0  # lower bound on the EMA, as a per-element mean square
    ema_norm: float | None = None

    def balance_weights(self, n_views) -> tuple:
        return rend_weight(n_views, self.c_rend), self.diff_weight()

    def diff_weight(self) -> float:
        if not self.ema_norm or self.ema_norm <= 0:
            raise ValueError("EMA of code norms is zero; diffusion weight undefined")
        return self.c_diff / self.ema_norm

    def ema_update(self, codes: np.ndarray) -> float:
        """Fold the batch-mean squared Frobenius norm of bounded codes into the EMA."""
        codes = np.asarray(codes, dtype=np.float64)
        if len(codes) == 0:
            raise ValueError("empty code batch")
        mean = float(np.mean(np.sum(codes.reshape(len(codes), -1) ** 2, axis=1)))
        if self.ema_norm is None:
            new = mean
        else:
            new = self.ema_decay * self.ema_norm + (1.0 - self.ema_decay) * mean
        self.ema_norm = max(new, self.ema_floor * self.dim_x)
        return self.ema_norm


def l2_reg_term(codes: Tensor, lambda_reg: float, dim_x: int) -> Tensor:
    """(lambda_reg / dim_x) * mean_i ||x_i||_F^2."""
    b = codes.shape[0]
    sq = ad.reshape(codes * codes, (b, -1)).sum(axis=1)
    return sq.mean() * (lambda_reg / dim_x)


# -- configuration -------------------------------------------------------------

def step_schedule(schedule, k: int):
    """Step function given as [[until_k, value], ..., [None, value]] over 1-based k."""
    for until, value in schedule:
        if until is None or k <= until:
            return value
    return schedule[-1][1]


@dataclass
class ModelConfig:
    channels: int = 4
    resolution: int = 16
    bound: float = 2.0
    decoder_hidden: int = 64
    n_freqs: int = 4
    unet_base: int = 32
    unet_mults: tuple = (1, 2)
    unet_depth: int = 2
    unet_groups: int = 8
    use_tanh: bool = True

    @property
    def code_shape(self) -> tuple:
        return (3, self.channels, self.resolution, self.resolution)

    @property
    def dim_x(self) -> int:
        return 3 * self.channels * self.resolution ** 2

    def validate(self) -> None:
        div = 2 ** len(self.unet_mults)
        if self.resolution % div:
            raise ValueError(f"resolution {self.resolution} not divisible by {div} (U-Net levels)")
        if self.bound <= 0 or self.channels < 1:
            raise ValueError("bound and channels must be positive")
        if self.unet_base % self.unet_groups:
            raise ValueError("unet_base must be divisible by unet_groups")


@dataclass
class TrainConfig:
    c_rend: float = 40.0 / 1024  # 40 per pixels-per-view (32x32 desk views)
    c_diff: float = 1.0
    lambda_reg: float = 0.003
    use_l2: bool = True
    omega: float = 0.5
    scene_batch: int = 4
    ray_batch: int = 512
    n_samples: int = 16
    k_out: int = 2000
    k_in: list = field(default_factory=lambda: [[50, 16], [None, 4]])
    lr_mult: list = field(default_factory=lambda: [[500, 1.0], [1000, 0.5], [1500, 0.25], [None, 0.125]])
    lr_code: float = 0.05
    lr_decoder: float = 0.005
    lr_diffusion: float = 1e-3
    ema_decay: float = 0.999
    ema_floor: float = 1e-3
    reset_at: int | None = None
    stratified: bool = True
    cache_prior: bool = True
    checkpoint_every: int = 0
    near: float = 0.5
    far: float = 4.5

    def validate(self) -> None:
        if self.scene_batch < 1 or self.ray_batch < 1 or self.n_samples < 2 or self.k_out < 0:
            raise ValueError("batch sizes, n_samples and k_out must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.c_rend < 0 or self.c_diff < 0 or self.lambda_reg < 0:
            raise ValueError("weight constants must be non-negative")
        for sched in (self.k_in, self.lr_mult):
            if not sched or sched[-1][0] is not None:
                raise ValueError("step schedules must end with an open-ended [null, value] entry")
        if any(int(v) < 1 for _, v in self.k_in):
            raise ValueError("K_in must be >= 1")


# -- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    raw_codes: np.ndarray  # [N, 3, C, R, R]
    decoder: Decoder
    unet: UNet
    code_opt: RowAdam
    dec_opt: AdamState
    unet_opt: AdamState
    balancer: WeightBalancer
    sched: NoiseSchedule
    model: ModelConfig
    rng: np.random.Generator
    k_out: int = 0
    cached_prior: np.ndarray | None = None

    def codes(self, idx=None) -> np.ndarray:
        raw = self.raw_codes if idx is None else self.raw_codes[idx]
        return bound_codes(Tensor(raw), self.model).data


def bound_codes(raw: Tensor, model: ModelConfig) -> Tensor:
    return tanh_map(raw, model.bound) if model.use_tanh else raw


def unbound_codes(x: np.ndarray, model: ModelConfig) -> np.ndarray:
    return tanh_unmap(x, model.bound).astype(np.float32) if model.use_tanh else np.asarray(x, np.float32)


def init_state(n_scenes: int, model: ModelConfig, cfg: TrainConfig, seed: int,
               sched: NoiseSchedule | None = None) -> TrainState:
    model.validate()
    cfg.validate()
    rng = np.random.default_rng(seed)
    dec = Decoder(model.channels, model.decoder_hidden, model.n_freqs, rng=np.random.default_rng([seed, 1]))
    unet = UNet(3 * model.channels, base=model.unet_base, mults=tuple(model.unet_mults),
                depth=model.unet_depth, groups=model.unet_groups, rng=np.random.default_rng([seed, 2]))
    raw = np.zeros((n_scenes,) + model.code_shape, dtype=np.float32)
    return TrainState(
        raw_codes=raw, decoder=dec, unet=unet,
        code_opt=RowAdam.zeros_like(raw, lr=cfg.lr_code),
        dec_opt=AdamState.for_params(dec.parameters(), lr=cfg.lr_decoder),
        unet_opt=AdamState.for_params(unet.parameters(), lr=cfg.lr_diffusion),
        balancer=WeightBalancer(cfg.c_rend, cfg.c_diff, model.dim_x, cfg.ema_decay, cfg.lambda_reg,
                                cfg.ema_floor),
        sched=sched or make_linear_schedule(), model=model, rng=rng)


@contextlib.contextmanager
def frozen(params):
    """Temporarily mark parameters non-differentiable (skips their weight gradients)."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _finite(term: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(term, "non-finite value")


def prior_gradient(state: TrainState, cfg: TrainConfig, raw: np.ndarray, t, eps,
                   want_params: bool = True):
    """Gradient of lambda_diff * L_diff (+ L2) w.r.t. raw codes (and U-Net params)."""
    lam = state.balancer.diff_weight()
    ctx = contextlib.nullcontext() if want_params else frozen(state.unet.parameters())
    with ctx, Tape() as tape:
        raw_t = Tensor(raw, requires_grad=True)
        x = bound_codes(raw_t, state.model)
        l_diff = diffusion_loss(state.unet, x, state.sched, cfg.omega, t=t, eps=eps)
        loss = l_diff * lam
        if cfg.use_l2 and cfg.lambda_reg > 0:
            loss = loss + l2_reg_term(x, cfg.lambda_reg, state.model.dim_x)
        _finite("L_diff", loss.data)
        grads = tape.backward(loss)
    g_x = grads[raw_t]
    _finite("g_x^diff", g_x)
    g_phi = [grads[p] for p in state.unet.parameters()] if want_params else None
    return g_x, g_phi, float(l_diff.item())


def outer_step(state: TrainState, observations: list, cfg: TrainConfig, hook=None) -> dict:
    """One outer iteration of the single-stage loop; returns scalar diagnostics.

    ``hook(k_in, info)`` is called after every inner iteration with the prior
    gradient that was used, for instrumentation.
    """
    k = state.k_out + 1
    rng = state.rng
    n = len(observations)
    if n < cfg.scene_batch:
        raise ValueError(f"dataset has {n} scenes, fewer than the scene batch {cfg.scene_batch}")
    idx = np.sort(rng.choice(n, cfg.scene_batch, replace=False))
    obs = [observations[i] for i in idx]
    k_in_total = int(step_schedule(cfg.k_in, k))
    mult = float(step_schedule(cfg.lr_mult, k))
    if state.balancer.ema_norm is None:
        state.balancer.ema_update(state.codes(idx))

    t, eps = draw_noise(rng, (len(idx),) + state.model.code_shape, state.sched.T, np.float32)
    g_diff, g_phi, l_diff = prior_gradient(state, cfg, state.raw_codes[idx], t, eps)
    state.cached_prior = g_diff

    lam_r = np.array([rend_weight(o.n_views, cfg.c_rend) for o in obs])
    dec_params = state.decoder.parameters()
    l_rend = 0.0
    for k_in in range(k_in_total):
        last = k_in == k_in_total - 1
        batch = make_ray_batch(obs, cfg.ray_batch, rng, cfg.near, cfg.far)
        ctx = contextlib.nullcontext() if last else frozen(dec_params)
        with ctx, Tape() as tape:
            raw_t = Tensor(state.raw_codes[idx], requires_grad=True)
            x = bound_codes(raw_t, state.model)
            loss = rendering_loss(x, state.decoder, batch, cfg.n_samples,
                                  rng if cfg.stratified else None, scene_weights=lam_r)
            _finite("L_rend", loss.data)
            grads = tape.backward(loss)
        l_rend = float(loss.item())
        g_rend = grads[raw_t]
        _finite("g_x^rend", g_rend)
        if cfg.cache_prior:
            prior = state.cached_prior
        else:
            prior = prior_gradient(state, cfg, state.raw_codes[idx], t, eps, want_params=False)[0]
        if hook is not None:
            hook(k_in, {"prior": prior, "g_rend": g_rend, "idx": idx})
        state.code_opt.lr_mult = mult
        state.code_opt.step(state.raw_codes, idx, g_rend + prior, name="codes")
        if last:
            state.dec_opt.lr_mult = mult
            adam_step(dec_params, [grads[p] for p in dec_params], state.dec_opt,
                      names=state.decoder.names())

    # the prior loop never reads phi, so applying its step here matches stepping it first
    state.unet_opt.lr_mult = mult
    adam_step(state.unet.parameters(), g_phi, state.unet_opt, names=state.unet.names())
    ema = state.balancer.ema_update(state.codes(idx))
    state.k_out = k
    return {"k_out": k, "lambda_rend": float(lam_r.mean()), "lambda_diff": state.balancer.c_diff / ema
            if ema > 0 else float("nan"), "L_rend": l_rend, "L_diff": l_diff, "ema_norm": ema}


def reset_codes_to_mean(state: TrainState) -> TrainState:
    """Replace every code by the elementwise mean bounded code and reset code optimizer state."""
    mean = state.codes().mean(axis=0)
    state.raw_codes[:] = unbound_codes(mean, state.model)[None]
    state.code_opt.reset()
    return state


LOG_FIELDS = ("k_out", "lambda_rend", "lambda_diff", "L_rend", "L_diff", "ema_norm", "wall_time")


def train(state: TrainState, observations: list, cfg: TrainConfig, checkpoint_fn=None,
          progress=None) -> TrainState:
    """Run outer steps until ``cfg.k_out``; ``progress(info)`` receives one record per step."""
    cfg.validate()
    start = time.perf_counter()
    if checkpoint_fn is not None and state.k_out == 0:
        checkpoint_fn(state)
    while state.k_out < cfg.k_out:
        if cfg.reset_at is not None and state.k_out == cfg.reset_at:
            reset_codes_to_mean(state)
            log.info("codes reset to their mean at k_out=%d", state.k_out)
        info = outer_step(state, observations, cfg)
        info["wall_time"] = round(time.perf_counter() - start, 3)
        if progress is not None:
            progress(info)
        if checkpoint_fn is not None and cfg.checkpoint_every and state.k_out % cfg.checkpoint_every == 0:
            checkpoint_fn(state)
    return state


def observations_for(scenes, near: float = 0.5, far: float = 4.5) -> list:
    return [Observations.from_views(s.images, s.poses, s.intrinsics, near, far) for s in scenes]


# -- checkpoints -----------------------------------------------------------------

def state_tensors(state: TrainState) -> dict:
    rec = {"codes.raw": state.raw_codes,
           "codes.adam.m": state.code_opt.m, "codes.adam.v": state.code_opt.v,
           "codes.adam.steps": state.code_opt.steps.astype(np.float64),
           "k_out": np.array([state.k_out], dtype=np.float64),
           "balancer.ema_norm": np.array([np.nan if state.balancer.ema_norm is None
                                          else state.balancer.ema_norm], dtype=np.float64)}
    for prefix, module, opt in (("decoder", state.decoder, state.dec_opt), ("unet", state.unet, state.unet_opt)):
        for name, p, m, v in zip(module.names(), module.parameters(), opt.m, opt.v):
            rec[f"{prefix}.{name}"] = p.data
            rec[f"{prefix}.adam.m.{name}"] = m
            rec[f"{prefix}.adam.v.{name}"] = v
        rec[f"{prefix}.adam.step"] = np.array([opt.step], dtype=np.float64)
    rng_json = json.dumps(state.rng.bit_generator.state).encode()
    rec["rng"] = np.frombuffer(rng_json, dtype=np.uint8)
    return rec


def load_state_tensors(state: TrainState, rec: dict) -> TrainState:
    """Restore a state created by ``init_state`` with the same shapes."""
    def take(name, like):
        if name not in rec:
            raise KeyError(f"checkpoint is missing record {name!r}")
        arr = rec[name]
        if arr.shape != like.shape:
            raise ValueError(f"checkpoint record {name!r} has shape {arr.shape}, expected {like.shape}")
        return arr.astype(like.dtype)

    state.raw_codes = take("codes.raw", state.raw_codes)
    state.code_opt.m = take("codes.adam.m", state.code_opt.m)
    state.code_opt.v = take("codes.adam.v", state.code_opt.v)
    state.code_opt.steps = rec["codes.adam.steps"].astype(state.code_opt.steps.dtype)
    state.k_out = int(rec["k_out"][0])
    ema = float(rec["balancer.ema_norm"][0])
    state.balancer.ema_norm = None if np.isnan(ema) else ema
    for prefix, module, opt in (("decoder", state.decoder, state.dec_opt), ("unet", state.unet, state.unet_opt)):
        for i, (name, p) in enumerate(zip(module.names(), module.parameters())):
            p.data = take(f"{prefix}.{name}", p.data)
            opt.m[i] = take(f"{prefix}.adam.m.{name}", opt.m[i])
            opt.v[i] = take(f"{prefix}.adam.v.{name}", opt.v[i])
        opt.step = int(rec[f"{prefix}.adam.step"][0])
    state.rng.bit_generator.state = json.loads(rec["rng"].tobytes().decode())
    return state


def model_to_json(model: ModelConfig) -> dict:
    d = asdict(model)
    d["unet_mults"] = list(model.unet_mults)
    return d
