"""Command line: make-data, train, sample, reconstruct, interpolate, eval.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import sampler as sp
from .autodiff import NumericalError
from .config import ConfigError, RunConfig, load_config
from .field import render_image
from .formats import NtcError, image_grid, ntc_write, write_ppm
from .pipeline import eval_sweep, load_checkpoint, reconstruct_scene, run_training
from .synth import intrinsics_for, load_dataset, make_dataset, save_dataset, turntable_poses
from .trainer import observations_for

log = logging.getLogger("ssdnf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override(args) -> RunConfig | None:
    return load_config(args.config) if getattr(args, "config", None) else None


def _turntable(code, state, cfg: RunConfig, size: int) -> np.ndarray:
    K = intrinsics_for(size, size)
    return image_grid([render_image(code, state.decoder, p, K, size, size, cfg.sample.n_samples)
                       for p in turntable_poses(8)], cols=8)


def cmd_make_data(args) -> int:
    cfg = load_config(args.config)
    d = cfg.data
    ds = make_dataset(d.n_scenes, d.n_views, d.height, d.width, cfg.seed, d.sparse_view_subset,
                      d.n_test_scenes, d.n_views_test)
    save_dataset(ds, args.out)
    n_train, n_test = len(ds.split("train")), len(ds.split("test"))
    views = sum(s.n_views for s in ds.scenes)
    print(f"wrote {n_train} train + {n_test} test scenes ({views} views) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    scenes = ds.split("train")
    if len(scenes) < cfg.train.scene_batch:
        raise ConfigError(f"{len(scenes)} train scenes < scene batch {cfg.train.scene_batch}")
    out = _out_dir(args.out)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    obs = observations_for(scenes, cfg.train.near, cfg.train.far)

    def progress(info):
        if info["k_out"] % max(1, args.log_every) == 0:
            log.info("k_out=%d L_rend=%.5f L_diff=%.4f", info["k_out"], info["L_rend"], info["L_diff"])

    state = run_training(cfg, obs, out / "train_log.csv", out / "checkpoint.ntc", progress)
    print(f"trained {state.k_out} outer steps; checkpoint at {out / 'checkpoint.ntc'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint, _override(args))
    out = _out_dir(args.out)
    seed = cfg.seed if args.seed is None else args.seed
    codes = sp.sample_unconditional(state.unet, args.n, cfg.model.code_shape, state.sched, cfg.sample,
                                    seed, cfg.model.bound)
    ntc_write(out / "samples.ntc", {"codes": codes})
    for i, code in enumerate(codes):
        write_ppm(out / f"sample_{i:03d}.ppm", _turntable(code, state, cfg, cfg.data.height))
    print(f"wrote {args.n} sampled codes and turntables to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint, _override(args))
    ds = load_dataset(args.data)
    by_id = {s.scene_id: s for s in ds.scenes}
    if args.scene not in by_id:
        raise ConfigError(f"unknown scene {args.scene!r}; have {', '.join(by_id)}")
    scene = by_id[args.scene]
    views = [int(v) for v in args.views.split(",")]
    seed = cfg.seed if args.seed is None else args.seed
    code, scores = reconstruct_scene(state, cfg, scene, views, seed)
    out = _out_dir(args.out)
    ntc_write(out / "code.ntc", {"code": code})
    for v, im in zip(scores["views"], scores.pop("images")):
        write_ppm(out / f"view_{v:03d}.ppm", im)
    scores.update(scene=scene.scene_id, input_views=views)
    (out / "metrics.json").write_text(json.dumps(scores, indent=2) + "\n")
    print(f"{scene.scene_id}: held-out PSNR {scores['mean_psnr']:.2f} dB, SSIM {scores['mean_ssim']:.4f}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint, _override(args))
    if args.n_steps < 2:
        raise ConfigError("--n-steps must be >= 2")
    out = _out_dir(args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    shape = cfg.model.code_shape
    ends = [sp.streams(s)[0].standard_normal((1,) + shape).astype(np.float32) for s in seeds]
    pose = turntable_poses(8)[1]
    K = intrinsics_for(cfg.data.height, cfg.data.width)
    det = replace(cfg.sample, langevin_steps=0)
    codes, images = [], []
    for u in np.linspace(0.0, 1.0, args.n_steps):
        x_T = sp.slerp(ends[0], ends[1], float(u))
        code = sp.run_sampler(state.unet, x_T, state.sched, det, None, cfg.model.bound)[0]
        codes.append(code)
        images.append(render_image(code, state.decoder, pose, K, cfg.data.height, cfg.data.width,
                                   cfg.sample.n_samples))
    ntc_write(out / "interp.ntc", {"codes": np.stack(codes), "u": np.linspace(0.0, 1.0, args.n_steps)})
    write_ppm(out / "interp.ppm", image_grid(images, cols=args.n_steps))
    print(f"wrote {args.n_steps} interpolated samples to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint, _override(args))
    ds = load_dataset(args.data)
    scenes = ds.split("test")
    if not scenes:
        raise ConfigError("dataset has no test scenes")
    if cfg.eval.scenes is not None:
        scenes = scenes[:cfg.eval.scenes]
    counts = [int(v) for v in args.views.split(",")] if args.views else None
    rows = eval_sweep(state, cfg, scenes, counts, seed=cfg.seed,
                      progress=lambda r: log.info("views=%d PSNR=%.2f", r["n_views"], r["psnr"]))
    out = _out_dir(args.out)
    (out / "eval.json").write_text(json.dumps({"rows": rows, "scenes": [s.scene_id for s in scenes]},
                                              indent=2) + "\n")
    for r in rows:
        print(f"{r['n_views']:>3} views  PSNR {r['psnr']:6.2f}  SSIM {r['ssim']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssdnf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic multi-view dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="single-stage training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="unconditional scene sampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("reconstruct", help="image-guided reconstruction of one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--views", required=True, help="comma-separated input view indices")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="slerp between two initial noises")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-steps", type=int, default=7)
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("eval", help="sparse-to-dense reconstruction sweep over the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--views", help="comma-separated input-view counts (default from config)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)
    return ap


def _threads():
    # one BLAS thread unless overridden: keeps runs bitwise reproducible
    n = os.environ.get("SSDNF_THREADS", "1")
    try:
        return threadpool_limits(max(1, int(n)))
    except ValueError:
        raise ConfigError(f"SSDNF_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.fn(args)
    except (OSError, NtcError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
