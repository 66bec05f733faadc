"""End-to-end helpers shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import json
from dataclasses import replace

import numpy as np

from . import sampler as sp
from .config import RunConfig, parse_config
from .diffusion import make_linear_schedule
from .field import Observations, render_image
from .formats import ntc_read, ntc_write
from .metrics import psnr, ssim
from .trainer import LOG_FIELDS, TrainState, init_state, load_state_tensors, state_tensors, train


def new_state(cfg: RunConfig, n_scenes: int) -> TrainState:
    sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    return init_state(n_scenes, cfg.model, cfg.train, cfg.seed, sched)


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    rec = state_tensors(state)
    rec["config"] = np.frombuffer(json.dumps(cfg.to_json(), sort_keys=True).encode(), dtype=np.uint8)
    ntc_write(path, rec)


def load_checkpoint(path, override: RunConfig | None = None) -> tuple:
    """Returns (state, config). ``override`` may replace non-model sections; model shapes must agree."""
    rec = ntc_read(path)
    if "config" not in rec:
        raise ValueError(f"{path}: not a training checkpoint (no config record)")
    cfg = parse_config(json.loads(rec["config"].tobytes().decode()))
    if override is not None:
        if override.model != cfg.model:
            raise ValueError("model section of the config disagrees with the checkpoint")
        cfg = replace(override, model=cfg.model)
    state = new_state(cfg, rec["codes.raw"].shape[0])
    load_state_tensors(state, rec)
    return state, cfg


def run_training(cfg: RunConfig, observations: list, log_path=None, checkpoint_path=None,
                 progress=None, state: TrainState | None = None) -> TrainState:
    state = state or new_state(cfg, len(observations))

    def ckpt(s):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, s, cfg)

    if log_path is None:
        return train(state, observations, cfg.train, checkpoint_fn=ckpt, progress=progress)
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        f.flush()

        def log_row(info):
            writer.writerow(info)
            f.flush()
            if progress is not None:
                progress(info)
        state = train(state, observations, cfg.train, checkpoint_fn=ckpt, progress=log_row)
    ckpt(state)
    return state


# -- reconstruction and evaluation --------------------------------------------------

def input_views(n: int, pool: int = 16) -> list:
    """n input view indices spread evenly over the first ``pool`` views."""
    return sorted({int(v) for v in np.floor(np.arange(n) * pool / n)})


def render_views(code: np.ndarray, state: TrainState, scene, views, n_samples: int) -> list:
    h, w = scene.images.shape[1:3]
    return [render_image(code, state.decoder, scene.poses[v], scene.intrinsics, h, w, n_samples)
            for v in views]


def score_views(code: np.ndarray, state: TrainState, scene, views, n_samples: int) -> dict:
    imgs = render_views(code, state, scene, views, n_samples)
    p = [psnr(im, scene.images[v]) for im, v in zip(imgs, views)]
    s = [ssim(im, scene.images[v]) for im, v in zip(imgs, views)]
    return {"views": list(map(int, views)), "psnr": p, "ssim": s,
            "mean_psnr": float(np.mean(p)), "mean_ssim": float(np.mean(s)), "images": imgs}


def reconstruct_scene(state: TrainState, cfg: RunConfig, scene, views, seed: int,
                      budget: tuple | None = None, c_diff: float | None = None,
                      heldout=None) -> tuple:
    """Guided sampling + finetuning from the listed views; scores the held-out views.

    ``budget`` = (ft_outer, ft_inner, ft_lr) overrides the sample section.
    Returns (code, scores).
    """
    views = list(views)
    if not views or max(views) >= scene.n_views:
        raise ValueError(f"input views {views} out of range for {scene.n_views} views")
    scfg = cfg.sample
    if budget is not None:
        scfg = replace(scfg, ft_outer=budget[0], ft_inner=budget[1], ft_lr=budget[2])
    obs = Observations.from_views(scene.images[views], scene.poses[views], scene.intrinsics,
                                  scfg.near, scfg.far)
    code = sp.reconstruct([obs], state.unet, state.decoder, state.sched, scfg, cfg.model.code_shape,
                          seed, cfg.model.bound, state.balancer.ema_norm, cfg.model.use_tanh, c_diff)[0]
    if heldout is None:
        heldout = [v for v in range(scene.n_views) if v not in views]
    return code, score_views(code, state, scene, heldout, scfg.n_samples)


def eval_sweep(state: TrainState, cfg: RunConfig, scenes, view_counts=None, seed: int = 0,
               progress=None) -> list:
    """Mean held-out PSNR/SSIM per input-view count (held-out = views 16 and up)."""
    view_counts = view_counts or cfg.eval.view_counts
    rows = []
    for n in view_counts:
        ps, ss = [], []
        for k, scene in enumerate(scenes):
            heldout = list(range(16, scene.n_views))
            _, sc = reconstruct_scene(state, cfg, scene, input_views(n), seed + k,
                                      cfg.eval.budget(n), heldout=heldout)
            ps.append(sc["mean_psnr"])
            ss.append(sc["mean_ssim"])
        rows.append({"n_views": int(n), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))})
        if progress is not None:
            progress(rows[-1])
    return rows


def train_view_psnr(state: TrainState, scenes, n_samples: int, views_per_scene: int | None = None) -> float:
    codes = state.codes()
    ps = []
    for i, scene in enumerate(scenes):
        views = range(scene.n_views) if views_per_scene is None else range(min(views_per_scene, scene.n_views))
        ps.extend(score_views(codes[i], state, scene, list(views), n_samples)["psnr"])
    return float(np.mean(ps))


def weakly_monotone(values, tolerance: float = 0.3, allowed: int = 1) -> bool:
    """Non-decreasing, allowing ``allowed`` inversions no larger than ``tolerance``."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    return len(drops) <= allowed and all(d <= tolerance for d in drops)
