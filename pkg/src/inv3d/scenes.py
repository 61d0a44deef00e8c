"""Procedural ellipsoid scenes with exact analytic renders.

Each scene is a union of 1-3 axis-aligned ellipsoids with per-primitive
albedo, Lambertian single-light shading, and an optional surface pattern
(stripes or spots). Every novel view, depth map, and surface color is
queryable in closed form, which is what makes them usable as ground truth
for inversion benchmarks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .camera import CameraPose, camera_rays
from . import pngio

AMBIENT = 0.35
LIGHT_DIR = (0.35, 0.75, 0.55)  # unit-normalized at use
BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass
class SurfacePattern:
    kind: str  # "stripes" | "spots"
    color: tuple[float, float, float]
    frequency: float
    axis: tuple[float, float, float]
    phase: float = 0.0


@dataclass
class ProceduralScene:
    ellipsoids: list[Ellipsoid]
    pattern: SurfacePattern | None = None

    def __post_init__(self):
        for e in self.ellipsoids:
            for c, r in zip(e.center, e.radii):
                if abs(c) + r > 1.0:
                    raise ValueError("scene must fit in [-1,1]^3")

    # -- analytic queries ----------------------------------------------------

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest-hit ray trace against the ellipsoid union.

        Returns (t, hit_mask, normal, albedo): t is inf where nothing is hit.
        """
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        albedo = np.zeros((n, 3))
        for e in self.ellipsoids:
            c = np.asarray(e.center)
            r = np.asarray(e.radii)
            o = (origins - c) / r
            d = dirs / r
            a = (d * d).sum(1)
            b = 2.0 * (o * d).sum(1)
            cc = (o * o).sum(1) - 1.0
            disc = b * b - 4 * a * cc
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            t_hit = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
            t_hit = np.where(ok, t_hit, np.inf)
            closer = t_hit < best_t
            if closer.any():
                pts = origins[closer] + t_hit[closer, None] * dirs[closer]
                nrm = 2.0 * (pts - c) / (r * r)
                nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
                normal[closer] = nrm
                albedo[closer] = self._surface_albedo(pts, np.asarray(e.albedo))
                best_t = np.where(closer, t_hit, best_t)
        return best_t, np.isfinite(best_t), normal, albedo

    def _surface_albedo(self, pts: np.ndarray, base: np.ndarray) -> np.ndarray:
        alb = np.broadcast_to(base, pts.shape).copy()
        p = self.pattern
        if p is None:
            return alb
        axis = np.asarray(p.axis)
        axis = axis / np.linalg.norm(axis)
        proj = pts @ axis
        if p.kind == "stripes":
            sel = np.sin(p.frequency * proj + p.phase) > 0
        elif p.kind == "spots":
            s = np.sin(p.frequency * pts + p.phase)
            sel = s.prod(axis=1) > 0
        else:
            raise ValueError(f"unknown pattern kind {p.kind!r}")
        alb[sel] = np.asarray(p.color)
        return alb

    def density(self, points: np.ndarray, sharpness: float = 40.0, scale: float = 50.0):
        """Soft-union implicit density (smooth-min over ellipsoid level sets)."""
        pts = np.asarray(points, dtype=np.float64)
        vals = []
        for e in self.ellipsoids:
            q = np.linalg.norm((pts - np.asarray(e.center)) / np.asarray(e.radii), axis=-1)
            vals.append((q - 1.0) * min(e.radii))
        stacked = np.stack(vals, axis=0)
        # smooth min via -logsumexp
        m = -np.log(np.exp(-sharpness * stacked).sum(axis=0)) / sharpness
        return scale / (1.0 + np.exp(sharpness * m))

    def to_dict(self) -> dict:
        d = {"ellipsoids": [asdict(e) for e in self.ellipsoids]}
        d["pattern"] = asdict(self.pattern) if self.pattern else None
        return d

    @staticmethod
    def from_dict(d: dict) -> "ProceduralScene":
        ells = [Ellipsoid(tuple(e["center"]), tuple(e["radii"]), tuple(e["albedo"]))
                for e in d["ellipsoids"]]
        pat = d.get("pattern")
        pattern = None
        if pat:
            pattern = SurfacePattern(pat["kind"], tuple(pat["color"]),
                                     pat["frequency"], tuple(pat["axis"]),
                                     pat.get("phase", 0.0))
        return ProceduralScene(ells, pattern)


def render_scene(scene: ProceduralScene, pose: CameraPose, image_size: int,
                 far: float = 3.8):
    """Exact render: (image (H,W,3) in [0,1], depth (H,W) distance along the
    ray, far where the background is hit)."""
    origins, dirs = camera_rays(pose, image_size)
    t, hit, normal, albedo = scene.trace(origins, dirs)
    light = np.asarray(LIGHT_DIR)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normal @ light, 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    img = np.where(hit[:, None], albedo * shade[:, None], np.asarray(BACKGROUND))
    depth = np.where(hit, t, far)
    hw = image_size
    return img.reshape(hw, hw, 3), depth.reshape(hw, hw)


def random_scene(rng: np.random.Generator, textured: bool = False,
                 texture_kinds: tuple = ("stripes", "spots")) -> ProceduralScene:
    n = int(rng.integers(1, 4))
    ells = []
    for _ in range(n):
        radii = rng.uniform(0.28, 0.60, size=3)
        max_c = 0.95 - radii
        center = rng.uniform(-1, 1, size=3) * np.minimum(max_c, 0.32)
        albedo = rng.uniform(0.15, 0.9, size=3)
        ells.append(Ellipsoid(tuple(center), tuple(radii), tuple(albedo)))
    pattern = None
    if textured:
        kind = texture_kinds[int(rng.integers(len(texture_kinds)))]
        axis = rng.normal(size=3)
        pattern = SurfacePattern(
            kind=kind,
            color=tuple(rng.uniform(0.0, 1.0, size=3)),
            frequency=float(rng.uniform(9.0, 18.0)),
            axis=tuple(axis / np.linalg.norm(axis)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        )
    return ProceduralScene(ells, pattern)


def sample_view_pose(rng: np.random.Generator, radius: float = 2.6,
                     fov_y: float = 0.6, yaw_range: float = 0.5,
                     pitch_range: float = 0.35) -> CameraPose:
    return CameraPose(
        yaw=float(rng.uniform(-yaw_range, yaw_range)),
        pitch=float(rng.uniform(-pitch_range, pitch_range)),
        radius=radius,
        fov_y=fov_y,
    )


# -- dataset on disk ----------------------------------------------------------

DATASET_VERSION = 1


def generate_dataset(out_dir, n_scenes: int, views_per_scene: int, seed: int,
                     image_size: int = 64, textured: bool = False,
                     texture_kinds: tuple = ("stripes", "spots"),
                     far: float = 3.8) -> dict:
    """Render a procedural dataset to disk. Deterministic per seed: same call
    twice produces byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_entries = []
    for s in range(n_scenes):
        scene = random_scene(rng, textured=textured,
                             texture_kinds=tuple(texture_kinds))
        sdir = out / f"scene_{s:03d}"
        sdir.mkdir(exist_ok=True)
        poses = []
        for v in range(views_per_scene):
            pose = sample_view_pose(rng)
            img, depth = render_scene(scene, pose, image_size, far=far)
            pngio.save_image_u8(sdir / f"view_{v:03d}.png", img)
            np.save(sdir / f"depth_{v:03d}.npy", depth.astype(np.float32))
            poses.append(pose.to_dict())
        (sdir / "poses.json").write_text(json.dumps(poses, indent=1, sort_keys=True))
        (sdir / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1, sort_keys=True))
        scene_entries.append({"id": f"scene_{s:03d}", "n_views": views_per_scene})
    manifest = {
        "version": DATASET_VERSION,
        "seed": seed,
        "n_scenes": n_scenes,
        "views_per_scene": views_per_scene,
        "image_size": image_size,
        "textured": textured,
        "texture_kinds": list(texture_kinds),
        "far": far,
        "scenes": scene_entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class DatasetError(ValueError):
    pass


def load_dataset(root):
    """Returns (manifest, scenes): scenes is a list of dicts with keys
    id, images (V,H,W,3 float32), depths, poses, scene (ProceduralScene)."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    for key in ("version", "scenes", "image_size"):
        if key not in manifest:
            raise DatasetError(f"manifest missing field {key!r}")
    scenes = []
    for entry in manifest["scenes"]:
        sdir = root / entry["id"]
        poses = [CameraPose.from_dict(p) for p in json.loads((sdir / "poses.json").read_text())]
        images, depths = [], []
        for v in range(entry["n_views"]):
            images.append(pngio.load_image(sdir / f"view_{v:03d}.png"))
            depths.append(np.load(sdir / f"depth_{v:03d}.npy"))
        scenes.append({
            "id": entry["id"],
            "images": np.stack(images).astype(np.float32),
            "depths": np.stack(depths),
            "poses": poses,
            "scene": ProceduralScene.from_dict(json.loads((sdir / "scene.json").read_text())),
        })
    return manifest, scenes
