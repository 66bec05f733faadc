"""Test-time sampling: DDIM predictor, Langevin corrector, rendering guidance, finetuning, slerp."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .diffusion import NoiseSchedule, UNet, _coef, denoise, diffusion_loss, draw_noise
from .field import Decoder, RayBatch, make_ray_batch, render_rays, rendering_loss, tanh_map, tanh_unmap
from .trainer import frozen, l2_reg_term, rend_weight


@dataclass
class SampleConfig:
    ddim_steps: int = 50
    recon_ddim_steps: int = 75
    langevin_steps: int = 0
    langevin_delta: float = 0.4
    guidance_scale: float = 3.2 * 1024  # 3.2 x pixels-per-view
    omega: float = 0.5
    c_rend: float = 40.0 / 1024
    c_diff_ft: float = 1.0
    ray_batch: int = 1024
    n_samples: int = 16
    ft_outer: int = 25
    ft_inner: int = 4
    ft_lr: float = 0.01
    ft_decay: float = 0.998
    ft_lambda_reg: float = 0.003
    clip_x0: bool = True
    near: float = 0.5
    far: float = 4.5

    def validate(self) -> None:
        if self.ddim_steps < 1 or self.recon_ddim_steps < 1:
            raise ValueError("ddim_steps and recon_ddim_steps must be >= 1")
        if self.langevin_delta < 0 or self.guidance_scale < 0 or self.langevin_steps < 0:
            raise ValueError("langevin_delta, guidance_scale and langevin_steps must be >= 0")
        if self.ft_outer < 0 or self.ft_inner < 1:
            raise ValueError("ft_outer must be >= 0 and ft_inner >= 1")


def ddim_step(x_t, x0, eps, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if t_prev == 0:
        return np.array(x0, copy=True)
    a = np.asarray(sched.alpha[t_prev], dtype=np.asarray(x0).dtype)
    s = np.asarray(sched.sigma[t_prev], dtype=a.dtype)
    return a * x0 + s * eps


def langevin_correct(x_t, t: int, delta: float, eps_hat, rng, sched: NoiseSchedule, noise=None):
    """x <- x - 1/2 delta sigma eps_hat + sqrt(delta) sigma eps."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    x_t = np.asarray(x_t)
    if noise is None:
        noise = rng.standard_normal(x_t.shape)
    if delta == 0:
        return x_t.copy()
    s = sched.sigma[t]
    dt = x_t.dtype
    return x_t - (0.5 * delta * s) * np.asarray(eps_hat, dt) + (np.sqrt(delta) * s) * noise.astype(dt)


@dataclass
class Guide:
    """Observations steering the sampler: ray sets for each code in the batch."""
    observations: list  # one Observations per code
    decoder: Decoder
    rng: np.random.Generator  # ray-batch stream, independent from the Langevin noise


def batch_effective_views(n_views, batch: int, n_rays) -> np.ndarray:
    return np.asarray(batch, dtype=np.float64) / np.asarray(n_rays, dtype=np.float64) * np.asarray(n_views)


def guided_objective(x0: Tensor, decoder: Decoder, batch: RayBatch, n_views, weight,
                     cfg: SampleConfig) -> Tensor:
    """lambda_rend^B * sum_j 1/2 w ||y_gt - y||^2, summed over codes."""
    nv_b = batch_effective_views(n_views, batch.batch_size, batch.n_ray_total)
    lam = np.array([rend_weight(v, cfg.c_rend) for v in nv_b]) * np.asarray(weight)
    pred = render_rays(x0, decoder, batch.origins, batch.dirs, batch.near, batch.far, cfg.n_samples)
    err = pred - Tensor(batch.targets.astype(pred.dtype))
    per = (err * err).sum(axis=(1, 2)) * 0.5
    return (per * Tensor(lam.astype(pred.dtype))).sum()


def guidance_grad(net: UNet, x_t: np.ndarray, t: int, guide: Guide, sched: NoiseSchedule,
                  cfg: SampleConfig, batch: RayBatch | None = None):
    """Gradient of the guided objective w.r.t. x_t, back-propagated through the denoiser.

    Returns (g, x-hat) where x-hat is the uncorrected prediction.
    """
    if t < 1 or sched.sigma[t] <= 0:
        raise ValueError("guidance needs t >= 1")
    if batch is None:
        batch = make_ray_batch(guide.observations, cfg.ray_batch, guide.rng, cfg.near, cfg.far)
    n_views = [o.n_views for o in guide.observations]
    w = (sched.alpha[t] / sched.sigma[t]) ** (2 * cfg.omega)
    params = net.parameters() + guide.decoder.parameters()
    with frozen(params), Tape() as tape:
        xt = Tensor(np.asarray(x_t), requires_grad=True)
        x0 = denoise(net, xt, np.full(len(x_t), t), sched, want_eps=False).x0
        obj = guided_objective(x0, guide.decoder, batch, n_views, w, cfg)
        g = tape.backward(obj)[xt]
    return g, x0.data


def guided_denoise(x0: np.ndarray, g: np.ndarray, t: int, scale: float, sched: NoiseSchedule) -> np.ndarray:
    """x-hat <- x-hat - scale * sigma^2 / alpha * g."""
    a, s = sched.alpha[t], sched.sigma[t]
    if a == 0:
        raise ValueError("alpha is zero; correction undefined")
    coef = np.asarray(scale * s * s / a, dtype=x0.dtype)
    return x0 - coef * g.astype(x0.dtype)


def predict(net: UNet, x_t: np.ndarray, t: int, sched: NoiseSchedule, cfg: SampleConfig,
            bound: float, guide: Guide | None = None):
    """(x-hat, eps-hat) at step t; guidance corrects x-hat, clipping keeps it in [-s, s]."""
    if guide is not None:
        g, x0 = guidance_grad(net, x_t, t, guide, sched, cfg)
        x0 = guided_denoise(x0, g, t, cfg.guidance_scale, sched)
    else:
        x0 = denoise(net, Tensor(x_t), np.full(len(x_t), t), sched, want_eps=False).x0.data
    if cfg.clip_x0:
        x0 = np.clip(x0, -bound, bound)
    a = _coef(sched.alpha, t, x_t.ndim, x_t.dtype)
    s = _coef(sched.sigma, t, x_t.ndim, x_t.dtype)
    return x0, (x_t - a * x0) / s


def run_sampler(net: UNet, x_T: np.ndarray, sched: NoiseSchedule, cfg: SampleConfig, rng,
                bound: float, guide: Guide | None = None) -> np.ndarray:
    """DDIM from x_T down to t=0 with optional Langevin corrections and guidance."""
    cfg.validate()
    x = np.asarray(x_T, dtype=ad.default_dtype()).copy()
    grid = sched.ddim_grid(cfg.ddim_steps)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x0, eps = predict(net, x, int(t), sched, cfg, bound, guide)
        x = ddim_step(x, x0, eps, int(t), int(t_prev), sched).astype(x.dtype)
        if t_prev > 0:
            for _ in range(cfg.langevin_steps):
                _, eps = predict(net, x, int(t_prev), sched, cfg, bound, guide)
                x = langevin_correct(x, int(t_prev), cfg.langevin_delta, eps, rng, sched).astype(x.dtype)
    return np.clip(x, -bound, bound)


def streams(seed: int) -> tuple:
    """Independent (noise, guidance-ray, finetune) generators derived from one seed."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def sample_unconditional(net: UNet, n: int, code_shape, sched: NoiseSchedule, cfg: SampleConfig,
                         seed: int, bound: float) -> np.ndarray:
    noise_rng = streams(seed)[0]
    x_T = noise_rng.standard_normal((n,) + tuple(code_shape)).astype(ad.default_dtype())
    return run_sampler(net, x_T, sched, cfg, noise_rng, bound)


def finetune(code: np.ndarray, observations: list, net: UNet, decoder: Decoder, sched: NoiseSchedule,
             cfg: SampleConfig, rng, bound: float, ema_norm: float, use_tanh: bool = True,
             c_diff: float | None = None, hook=None) -> np.ndarray:
    """Refine bounded codes [B, 3, C, R, R] on their observations under rendering + prior loss.

    Uses the cached-prior inner/outer loop with the learning rate decaying by
    ``ft_decay`` per inner step. The L2 term (``ft_lambda_reg``) joins the cached
    prior. ``c_diff=0`` drops the diffusion prior, giving rendering-only finetuning.
    """
    c_diff = cfg.c_diff_ft if c_diff is None else c_diff
    code = np.asarray(code, dtype=ad.default_dtype())
    if cfg.ft_outer == 0:
        return code.copy()
    raw = tanh_unmap(code, bound).astype(code.dtype) if use_tanh else code.copy()

    def bounded(r):
        return tanh_map(r, bound) if use_tanh else r

    lam_d = c_diff / ema_norm
    dim_x = int(np.prod(code.shape[1:]))
    lam_r = np.array([rend_weight(o.n_views, cfg.c_rend) for o in observations])
    holder = Tensor(raw)
    opt = AdamState.for_params([holder], lr=cfg.ft_lr)
    params = net.parameters() + decoder.parameters()
    with frozen(params):
        for k_out in range(cfg.ft_outer):
            prior = np.zeros_like(raw)
            if lam_d > 0 or cfg.ft_lambda_reg > 0:
                with Tape() as tape:
                    r = Tensor(holder.data, requires_grad=True)
                    x = bounded(r)
                    loss = l2_reg_term(x, cfg.ft_lambda_reg, dim_x)
                    if lam_d > 0:
                        t, eps = draw_noise(rng, raw.shape, sched.T, raw.dtype)
                        loss = loss + diffusion_loss(net, x, sched, cfg.omega, t=t, eps=eps) * lam_d
                    prior = tape.backward(loss)[r]
            for k_in in range(cfg.ft_inner):
                batch = make_ray_batch(observations, cfg.ray_batch, rng, cfg.near, cfg.far)
                with Tape() as tape:
                    r = Tensor(holder.data, requires_grad=True)
                    loss = rendering_loss(bounded(r), decoder, batch, cfg.n_samples, rng, scene_weights=lam_r)
                    g = tape.backward(loss)[r]
                opt.lr_mult = cfg.ft_decay ** (k_out * cfg.ft_inner + k_in)
                adam_step([holder], [g + prior], opt, names=["finetune code"])
                if hook is not None:
                    hook(k_out, k_in, float(loss.item()))
    return bounded(Tensor(holder.data)).data


def reconstruct(observations: list, net: UNet, decoder: Decoder, sched: NoiseSchedule, cfg: SampleConfig,
                code_shape, seed: int, bound: float, ema_norm: float, use_tanh: bool = True,
                c_diff: float | None = None) -> np.ndarray:
    """Guided sampling (``recon_ddim_steps`` predictor steps) then finetuning; one code per observation set."""
    noise_rng, guide_rng, ft_rng = streams(seed)
    x_T = noise_rng.standard_normal((len(observations),) + tuple(code_shape)).astype(ad.default_dtype())
    guided = replace(cfg, ddim_steps=cfg.recon_ddim_steps)
    x = run_sampler(net, x_T, sched, guided, noise_rng, bound, Guide(observations, decoder, guide_rng))
    return finetune(x, observations, net, decoder, sched, cfg, ft_rng, bound, ema_norm, use_tanh, c_diff)


def slerp(x0, x1, u: float) -> np.ndarray:
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x1, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("slerp endpoints must be nonzero")
    cos = np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-7:
        out = (1 - u) * a + u * b
    elif np.pi - theta < 1e-7:
        raise ValueError("slerp undefined for antipodal endpoints")
    else:
        out = (np.sin((1 - u) * theta) * a + np.sin(u * theta) * b) / np.sin(theta)
    return out.astype(np.asarray(x0).dtype)
