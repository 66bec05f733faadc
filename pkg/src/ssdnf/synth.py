"""Procedural multi-view scenes: unions of colored spheres and boxes with an exact oracle renderer."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .field import rays_for_pose
from .formats import ntc_read, ntc_write

CAMERA_RADIUS = 2.5
FOV_DEG = 50.0
LIGHT_DIR = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])
AMBIENT = 0.3
CAMERA_CONVENTION = "right-handed, camera-to-world, -Z forward, +Y up"


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" (size = radius) or "box" (size = half extent)
    center: tuple
    size: float
    albedo: tuple


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple = ()

    def to_json(self) -> dict:
        return {"seed": self.seed, "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        prims = tuple(Primitive(p["kind"], tuple(p["center"]), p["size"], tuple(p["albedo"]))
                      for p in d["primitives"])
        return cls(int(d["seed"]), prims)


def gen_scene(seed: int) -> SceneSpec:
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    prims = []
    for _ in range(int(rng.integers(1, 5))):
        kind = "sphere" if rng.random() < 0.5 else "box"
        center = tuple(float(v) for v in rng.uniform(-0.6, 0.6, 3))
        size = float(rng.uniform(0.1, 0.4))
        albedo = tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))
        prims.append(Primitive(kind, center, size, albedo))
    return SceneSpec(int(seed), tuple(prims))


def _hit_sphere(o, d, c, r):
    oc = o - np.asarray(c)
    b = np.einsum("...i,...i", oc, d)
    disc = b * b - (np.einsum("...i,...i", oc, oc) - r * r)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t = np.where(t > 0, t, -b + sq)
    hit = (disc >= 0) & (t > 0)
    p = o + t[..., None] * d
    n = (p - np.asarray(c)) / r
    return np.where(hit, t, np.inf), n


def _hit_box(o, d, c, h):
    c = np.asarray(c)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (c - h - o) * inv
        tb = (c + h - o) * inv
    tlo, thi = np.minimum(ta, tb), np.maximum(ta, tb)
    t0, t1 = np.nanmax(tlo, axis=-1), np.nanmin(thi, axis=-1)
    t = np.where(t0 > 0, t0, t1)
    hit = (t0 <= t1) & (t > 0)
    p = o + t[..., None] * d
    q = (p - c) / h
    axis = np.argmax(np.abs(q), axis=-1)
    n = np.zeros_like(p)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(q, axis[..., None], -1)), -1)
    return np.where(hit, t, np.inf), n


def shade_rays(spec: SceneSpec, origins, dirs, light_dir=LIGHT_DIR, ambient: float = AMBIENT):
    """Nearest-hit Lambertian color per ray; white where nothing is hit."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    best = np.full(o.shape[:-1], np.inf)
    color = np.ones(o.shape)
    for prim in spec.primitives:
        fn = _hit_sphere if prim.kind == "sphere" else _hit_box
        t, n = fn(o, d, prim.center, prim.size)
        closer = t < best
        shade = ambient + (1.0 - ambient) * np.maximum(0.0, n @ l)
        color = np.where(closer[..., None], np.asarray(prim.albedo) * shade[..., None], color)
        best = np.minimum(best, t)
    return np.clip(color, 0.0, 1.0)


def oracle_render(spec: SceneSpec, pose, intrinsics, height: int, width: int,
                  light_dir=LIGHT_DIR, ambient: float = AMBIENT) -> np.ndarray:
    rays = rays_for_pose(pose, intrinsics, height, width)
    return shade_rays(spec, rays.origins, rays.dirs, light_dir, ambient).astype(np.float32)


# -- cameras -------------------------------------------------------------------

def intrinsics_for(height: int, width: int, fov_deg: float = FOV_DEG) -> np.ndarray:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1]], dtype=np.float64)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    up = np.asarray(up, dtype=np.float64)
    if abs(back @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, np.cross(back, right), back, eye
    return pose


def sphere_poses(n: int, rng, radius: float = CAMERA_RADIUS) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.stack([look_at(radius * u) for u in v])


def turntable_poses(n: int = 8, elevation_deg: float = 30.0, radius: float = CAMERA_RADIUS) -> np.ndarray:
    el = np.radians(elevation_deg)
    az = 2 * np.pi * np.arange(n) / n
    eyes = radius * np.stack([np.cos(el) * np.sin(az), np.full(n, np.sin(el)), np.cos(el) * np.cos(az)], 1)
    return np.stack([look_at(e) for e in eyes])


# -- datasets ------------------------------------------------------------------

@dataclass
class SceneData:
    scene_id: str
    split: str
    spec: SceneSpec
    images: np.ndarray  # [V, H, W, 3] float32
    poses: np.ndarray  # [V, 4, 4] float32
    intrinsics: np.ndarray  # [3, 3] float32

    @property
    def n_views(self) -> int:
        return len(self.images)


@dataclass
class Dataset:
    scenes: list = field(default_factory=list)
    height: int = 32
    width: int = 32
    seed: int = 0

    def split(self, name: str) -> list:
        return [s for s in self.scenes if s.split == name]


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_dataset(n_scenes: int, n_views_train: int, height: int, width: int, seed: int,
                 sparse_view_subset: int | None = None, n_test_scenes: int = 4,
                 n_views_test: int = 24) -> Dataset:
    """Train scenes (optionally thinned to a fixed random view subset) plus test scenes."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if sparse_view_subset is not None and not 1 <= sparse_view_subset <= n_views_train:
        raise ValueError("sparse_view_subset must be in [1, n_views_train]")
    K = intrinsics_for(height, width).astype(np.float32)
    ds = Dataset(height=height, width=width, seed=seed)
    for i in range(n_scenes + n_test_scenes):
        split = "train" if i < n_scenes else "test"
        rng = np.random.default_rng([int(seed), i, 1])
        spec = gen_scene(_scene_seed(seed, i))
        poses = sphere_poses(n_views_train if split == "train" else n_views_test, rng).astype(np.float32)
        if split == "train" and sparse_view_subset is not None:
            keep = np.sort(rng.choice(len(poses), sparse_view_subset, replace=False))
            poses = poses[keep]
        images = np.stack([oracle_render(spec, p, K, height, width) for p in poses])
        ds.scenes.append(SceneData(f"{split}{i:03d}", split, spec, images, poses, K))
    return ds


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "ssdnf-dataset-1",
        "camera_convention": CAMERA_CONVENTION,
        "height": ds.height, "width": ds.width, "seed": ds.seed,
        "scenes": [{"id": s.scene_id, "split": s.split, "n_views": s.n_views,
                    "file": f"scenes/{s.scene_id}.ntc", "spec": s.spec.to_json()} for s in ds.scenes],
    }
    for s in ds.scenes:
        ntc_write(root / "scenes" / f"{s.scene_id}.ntc",
                  {"images": s.images, "poses": s.poses, "intrinsics": s.intrinsics})
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / "manifest.json")


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    ds = Dataset(height=manifest["height"], width=manifest["width"], seed=manifest["seed"])
    for entry in manifest["scenes"]:
        rec = ntc_read(root / entry["file"])
        images = rec["images"]
        if images.shape[1:] != (ds.height, ds.width, 3) or len(images) != entry["n_views"]:
            raise ValueError(f"scene {entry['id']}: images {images.shape} disagree with manifest")
        ds.scenes.append(SceneData(entry["id"], entry["split"], SceneSpec.from_json(entry["spec"]),
                                   images, rec["poses"], rec["intrinsics"]))
    return ds


def dataset_digest(root) -> str:
    """SHA-256 over every file in a dataset directory (sorted relative paths)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
