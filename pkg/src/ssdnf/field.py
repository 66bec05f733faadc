"""Triplane NeRF auto-decoder: bounded scene codes, shared MLP decoder, volume rendering.

Camera convention (used everywhere): right-handed, camera looks down -Z,
+X right, +Y up; image rows grow downward. Poses are camera-to-world 4x4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BOUND = 1.0  # scene lives in [-BOUND, BOUND]^3


def tanh_map(raw, s: float) -> Tensor:
    if s <= 0:
        raise ValueError("bound s must be positive")
    return ad.tanh(raw if isinstance(raw, Tensor) else Tensor(raw)) * float(s)


def tanh_unmap(x: np.ndarray, s: float, margin: float = 1e-4) -> np.ndarray:
    """Inverse of ``tanh_map`` with values clamped just inside (-s, s)."""
    y = np.clip(np.asarray(x) / s, -1.0 + margin, 1.0 - margin)
    return np.arctanh(y)


def triplane_features(code: Tensor, points) -> Tensor:
    """Sum of bilinear samples from the XY, XZ and YZ planes.

    ``code`` is [B, 3, C, R, R] (or [3, C, R, R]); ``points`` is [B, P, 3]
    (or [P, 3]) in [-1, 1]^3. Returns [B, P, C].
    """
    code = code if isinstance(code, Tensor) else Tensor(code)
    points = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=code.dtype))
    squeeze = code.ndim == 4
    if squeeze:
        code = ad.reshape(code, (1,) + code.shape)
        points = ad.reshape(points, (1,) + points.shape)
    b, three, c, r1, r2 = code.shape
    if three != 3 or points.shape[0] != b or points.shape[-1] != 3:
        raise ad.ShapeError("triplane_features", code.shape, points.shape)
    p = points.shape[1]
    px, py, pz = points[:, :, 0:1], points[:, :, 1:2], points[:, :, 2:3]
    coords = ad.stack([ad.concat([px, py], axis=-1),
                       ad.concat([px, pz], axis=-1),
                       ad.concat([py, pz], axis=-1)], axis=1)  # [B, 3, P, 2]
    feats = ad.grid_sample(ad.reshape(code, (b * 3, c, r1, r2)), ad.reshape(coords, (b * 3, p, 2)))
    out = ad.reshape(feats, (b, 3, p, c)).sum(axis=1)
    return out[0] if squeeze else out


def encode_direction(d: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """sin/cos frequency encoding of unit directions: [..., 3] -> [..., 6 * n_freqs]."""
    d = np.asarray(d)
    scaled = d[..., None, :] * (2.0 ** np.arange(n_freqs, dtype=d.dtype))[:, None] * np.pi
    return np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1).reshape(d.shape[:-1] + (-1,))


class Decoder:
    """Shared MLP mapping triplane features + view direction to (density, color)."""

    def __init__(self, feat_dim: int, hidden: int = 64, n_freqs: int = 4, rng=None,
                 dtype=None, density_bias: float = -1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or ad.default_dtype()
        self.feat_dim, self.hidden, self.n_freqs = feat_dim, hidden, n_freqs
        enc = 6 * n_freqs
        hc = max(hidden // 2, 8)

        def w(i, o, gain=1.0):
            return Tensor((rng.standard_normal((i, o)) * gain * np.sqrt(2.0 / i)).astype(dtype),
                          requires_grad=True)

        def b(o, val=0.0):
            return Tensor(np.full(o, val, dtype=dtype), requires_grad=True)

        self.params = {
            "w1": w(feat_dim, hidden), "b1": b(hidden),
            "w2": w(hidden, hidden), "b2": b(hidden),
            "wd": w(hidden, 1, 0.5), "bd": b(1, density_bias),
            "wc1": w(hidden + enc, hc), "bc1": b(hc),
            "wc2": w(hc, 3, 0.5), "bc2": b(3),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_(self) -> "Decoder":
        for p in self.params.values():
            p.data[...] = 0
        return self

    def __call__(self, feat: Tensor, dirs: np.ndarray, group: int = 1):
        """Decode ``feat`` [M, C] with ``dirs`` [M // group, 3].

        Consecutive blocks of ``group`` feature rows share one direction (the
        samples along a ray), so the direction branch runs once per ray.
        Returns (density [M], rgb [M, 3]).
        """
        P = self.params
        m = feat.shape[0]
        h = ad.silu(ad.linear(feat, P["w1"], P["b1"]))
        h = ad.silu(ad.linear(h, P["w2"], P["b2"]))
        density = ad.softplus(ad.linear(h, P["wd"], P["bd"]))
        hidden = self.hidden
        enc = Tensor(encode_direction(np.asarray(dirs, dtype=feat.dtype), self.n_freqs).astype(feat.dtype))
        wc1 = P["wc1"]
        pre_h = h @ wc1[:hidden]
        pre_d = enc @ wc1[hidden:]
        hc_dim = wc1.shape[1]
        pre = ad.reshape(pre_h, (m // group, group, hc_dim)) + ad.reshape(pre_d, (m // group, 1, hc_dim))
        hc = ad.silu(ad.reshape(pre, (m, hc_dim)) + P["bc1"])
        rgb = ad.sigmoid(ad.linear(hc, P["wc2"], P["bc2"]))
        return ad.reshape(density, (m,)), rgb

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ad.ShapeError(f"decoder.load_state[{k}]", state[k].shape, v.shape)
            v.data = np.array(state[k], dtype=v.dtype)


def decode(decoder: Decoder, feature, d):
    """Single-point convenience wrapper: C-vector + unit direction -> (density, rgb)."""
    feature = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature))
    d = np.asarray(d, dtype=feature.dtype)
    if abs(np.linalg.norm(d) - 1.0) > 1e-5:
        raise ValueError("direction must be unit length")
    density, rgb = decoder(ad.reshape(feature, (1, -1)), d.reshape(1, 3))
    return density[0], rgb[0]


# -- rays ---------------------------------------------------------------------

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError(f"ray near ({self.near}) must be < far ({self.far})")


@dataclass
class Rays:
    """A bundle of rays with arbitrary leading shape."""
    origins: np.ndarray
    dirs: np.ndarray
    near: float
    far: float

    @property
    def shape(self) -> tuple:
        return self.origins.shape[:-1]


def rays_for_pose(pose: np.ndarray, intrinsics: np.ndarray, height: int, width: int,
                  near: float = 0.5, far: float = 4.5) -> Rays:
    """One ray per pixel center; returns [H, W, 3] origins and unit directions."""
    K = np.asarray(intrinsics, dtype=np.float64)
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    if fx == 0 or fy == 0 or not np.isfinite([fx, fy, cx, cy]).all():
        raise ValueError("degenerate intrinsics (zero focal length)")
    pose = np.asarray(pose, dtype=np.float64)
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([(uu - cx) / fx, -(vv - cy) / fy, -np.ones_like(uu)], axis=-1)
    dirs = cam @ pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    return Rays(origins, dirs, near, far)


def clip_to_cube(origins: np.ndarray, dirs: np.ndarray, near: float, far: float, bound: float = BOUND):
    """Slab test against [-bound, bound]^3. Returns (t0, t1); misses get t0 == t1."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (-bound - origins) * inv
        tb = (bound - origins) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t0 = np.maximum(tmin, near)
    t1 = np.minimum(tmax, far)
    t1 = np.maximum(t1, t0)
    return t0, t1


def sample_along(t0: np.ndarray, t1: np.ndarray, n_samples: int, rng=None):
    """Stratified (with ``rng``) or midpoint sample depths; returns (depths [..., S], deltas [..., S])."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    seg = (t1 - t0) / n_samples
    jitter = rng.random(t0.shape + (n_samples,)) if rng is not None else 0.5
    depths = t0[..., None] + (np.arange(n_samples) + jitter) * seg[..., None]
    deltas = np.broadcast_to(seg[..., None], depths.shape)
    return depths, deltas


def composite(density: Tensor, rgb: Tensor, deltas: np.ndarray, background=(1.0, 1.0, 1.0)):
    """Quadrature along the last sample axis.

    density [..., S], rgb [..., S, 3], deltas [..., S] -> (color [..., 3], weights [..., S]).
    """
    dd = density * Tensor(np.asarray(deltas, dtype=density.dtype))
    trans = ad.exp(-ad.cumsum(dd, axis=-1, exclusive=True))
    alpha = 1.0 - ad.exp(-dd)
    weights = trans * alpha
    wsum = weights.sum(axis=-1, keepdims=True)
    color = (ad.reshape(weights, weights.shape + (1,)) * rgb).sum(axis=-2)
    bg = Tensor(np.asarray(background, dtype=density.dtype))
    return color + (1.0 - wsum) * bg, weights


def render_rays(code: Tensor, decoder: Decoder, origins: np.ndarray, dirs: np.ndarray,
                near: float, far: float, n_samples: int, rng=None, background=(1.0, 1.0, 1.0),
                return_weights: bool = False):
    """Render [B, N] rays through bounded codes [B, 3, C, R, R] -> colors [B, N, 3]."""
    code = code if isinstance(code, Tensor) else Tensor(code)
    b, n = origins.shape[:2]
    t0, t1 = clip_to_cube(origins, dirs, near, far)
    depths, deltas = sample_along(t0, t1, n_samples, rng)
    pts = origins[:, :, None, :] + depths[..., None] * dirs[:, :, None, :]
    pts = np.clip(pts, -BOUND, BOUND).astype(code.dtype).reshape(b, n * n_samples, 3)
    feat = triplane_features(code, pts)  # [B, N*S, C]
    c = feat.shape[-1]
    density, rgb = decoder(ad.reshape(feat, (b * n * n_samples, c)), dirs.reshape(b * n, 3),
                           group=n_samples)
    density = ad.reshape(density, (b, n, n_samples))
    rgb = ad.reshape(rgb, (b, n, n_samples, 3))
    color, weights = composite(density, rgb, deltas, background)
    return (color, weights) if return_weights else color


def render_ray(code, decoder: Decoder, ray: Ray, n_samples: int, rng=None, background=(1.0, 1.0, 1.0)):
    code = code if isinstance(code, Tensor) else Tensor(code)
    if code.ndim == 4:
        code = ad.reshape(code, (1,) + code.shape)
    out = render_rays(code, decoder, ray.origin.reshape(1, 1, 3), ray.direction.reshape(1, 1, 3),
                      ray.near, ray.far, n_samples, rng, background)
    return ad.reshape(out, (3,))


def render_image(code: np.ndarray, decoder: Decoder, pose, intrinsics, height: int, width: int,
                 n_samples: int, near: float = 0.5, far: float = 4.5, chunk: int = 4096,
                 background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Deterministic (midpoint) render of one view; no tape. Returns [H, W, 3] float array."""
    rays = rays_for_pose(pose, intrinsics, height, width, near, far)
    o = rays.origins.reshape(1, -1, 3)
    d = rays.dirs.reshape(1, -1, 3)
    code = np.asarray(code)[None]
    parts = []
    for s in range(0, o.shape[1], chunk):
        parts.append(render_rays(Tensor(code), decoder, o[:, s:s + chunk], d[:, s:s + chunk],
                                 near, far, n_samples, background=background).data[0])
    return np.clip(np.concatenate(parts, axis=0).reshape(height, width, 3), 0.0, 1.0)


# -- rendering loss ----------------------------------------------------------

@dataclass
class RayBatch:
    """Per-scene ray mini-batch: origins/dirs/targets are [B, N, 3]."""
    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray
    n_ray_total: np.ndarray  # [B] total observed rays of each scene
    near: float = 0.5
    far: float = 4.5

    @property
    def batch_size(self) -> int:
        return self.origins.shape[1]


def rendering_loss(code: Tensor, decoder: Decoder, batch: RayBatch, n_samples: int, rng=None,
                   background=(1.0, 1.0, 1.0), scene_weights=None) -> Tensor:
    """Mean over scenes of (N_ray_i / |B_ray|) * sum_j 1/2 ||y_gt - y||^2.

    ``scene_weights`` ([B]) multiplies each scene's term before averaging, which is
    how per-scene rendering weights enter without a second pass.
    """
    if batch.origins.shape[1] == 0:
        raise ValueError("empty ray batch")
    pred = render_rays(code, decoder, batch.origins, batch.dirs, batch.near, batch.far,
                       n_samples, rng, background)
    err = pred - Tensor(batch.targets.astype(pred.dtype))
    per_scene = (err * err).sum(axis=(1, 2)) * 0.5
    scale = np.asarray(batch.n_ray_total, dtype=np.float64) / batch.batch_size
    if scene_weights is not None:
        scale = scale * np.asarray(scene_weights, dtype=np.float64)
    return (per_scene * Tensor(scale.astype(pred.dtype))).mean()


@dataclass
class Observations:
    """All observed rays of one scene, flattened to [N_ray, 3]."""
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    n_views: int

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    @classmethod
    def from_views(cls, images, poses, intrinsics, near: float = 0.5, far: float = 4.5) -> "Observations":
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[0] != len(poses):
            raise ValueError(f"images {images.shape} do not match {len(poses)} poses")
        h, w = images.shape[1:3]
        rays = [rays_for_pose(p, intrinsics, h, w, near, far) for p in poses]
        o = np.concatenate([r.origins.reshape(-1, 3) for r in rays])
        d = np.concatenate([r.dirs.reshape(-1, 3) for r in rays])
        return cls(o, d, images.reshape(-1, 3).astype(np.float32), len(poses))

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """n rays without replacement (all rays, in order, when n >= N_ray or rng is None)."""
        if n >= self.n_rays or rng is None:
            sel = np.arange(self.n_rays) if n >= self.n_rays else np.arange(n)
        else:
            sel = rng.choice(self.n_rays, size=n, replace=False)
        return self.origins[sel], self.dirs[sel], self.colors[sel]


def make_ray_batch(obs_list, n: int, rng, near: float = 0.5, far: float = 4.5) -> RayBatch:
    """Stack one equally sized ray batch per scene."""
    n = min(n, min(o.n_rays for o in obs_list))
    parts = [o.sample(n, rng) for o in obs_list]
    return RayBatch(np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]),
                    np.stack([p[2] for p in parts]), np.array([o.n_rays for o in obs_list]), near, far)
