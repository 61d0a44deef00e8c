"""Image metrics, depth-reprojection consistency, and camera trajectories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .camera import CameraPose, camera_rays, project_points
from .generator import RenderConfig
from .geometry import bilinear_sample
from .inversion import FeatureExtractor, _default_extractor

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11,
         data_range: float = 1.0, multiscale: bool = False) -> float:
    """SSIM with a Gaussian window (sigma 1.5), C1=(0.01K)^2, C2=(0.03K)^2.

    multiscale=True averages plain SSIM over 3 dyadic scales (2x mean-pool
    between scales) as a lightweight multi-scale variant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if not multiscale:
        return _ssim_single(a, b, window, data_range)
    scores = []
    for _ in range(3):
        if min(a.shape[0], a.shape[1]) < window:
            break
        scores.append(_ssim_single(a, b, window, data_range))
        a = _downsample2(a)
        b = _downsample2(b)
    return float(np.mean(scores))


def _ssim_single(a, b, window, data_range):
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError("image smaller than the SSIM window")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    sigma = 1.5
    radius = window // 2

    def filt(x):
        return np.stack(
            [_gauss2d(x[..., c], sigma, radius) for c in range(x.shape[-1])],
            axis=-1,
        )

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    smap = num / den
    crop = smap[radius:-radius, radius:-radius]
    return float(crop.mean())


def _gauss2d(x, sigma, radius):
    kx = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (kx / sigma) ** 2)
    k /= k.sum()
    out = ndimage.convolve1d(x, k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def _downsample2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    if x.ndim == 3:
        return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def perceptual_distance(a: np.ndarray, b: np.ndarray,
                        extractor: FeatureExtractor | None = None) -> float:
    """Multi-scale feature-space distance (the package's LPIPS stand-in)."""
    a_t = torch.as_tensor(np.asarray(a), dtype=torch.float32)
    b_t = torch.as_tensor(np.asarray(b), dtype=torch.float32)
    if a_t.shape != b_t.shape:
        raise ValueError("shape mismatch")
    ex = extractor or _default_extractor(torch.float32)
    with torch.no_grad():
        total = 0.0
        for fa, fb in zip(ex(a_t), ex(b_t)):
            total += float((fa - fb).square().mean())
    return total


# -- trajectories -----------------------------------------------------------------


@dataclass
class Trajectory:
    poses: list[CameraPose]
    yaw_range: float
    pitch_range: float


def sphere_trajectory(n: int, yaw_range: float = 0.35, pitch_range: float = 0.25,
                      radius: float = 2.6, fov_y: float = 0.6) -> Trajectory:
    """Closed Lissajous loop on the view sphere, always looking at the
    origin: yaw = yaw_range*sin(2 pi t), pitch = pitch_range*sin(4 pi t)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    poses = []
    for k in range(n):
        t = k / n
        poses.append(CameraPose(
            yaw=yaw_range * np.sin(2 * np.pi * t),
            pitch=pitch_range * np.sin(4 * np.pi * t),
            radius=radius,
            fov_y=fov_y,
        ))
    return Trajectory(poses=poses, yaw_range=yaw_range, pitch_range=pitch_range)


# -- cross-view reprojection consistency --------------------------------------------


def reprojection_consistency_images(images, depths, poses, image_size: int,
                                    far: float, depth_eps: float = 0.02,
                                    opacity=None) -> float:
    """Mean masked PSNR of novel views warped into the canonical view.

    images/depths: lists of (H, W, 3) / (H, W); poses[0] is the canonical
    view, depth is distance along the unit ray. A pixel counts as co-visible
    when the canonical depth sampled at the reprojection agrees with the
    point's distance to the canonical camera within depth_eps (relative) and
    neither pixel is background (depth >= far).
    """
    if len(poses) < 2:
        if len(poses) == 1:
            return psnr(images[0], images[0])
        raise ValueError("need at least one pose")
    canon_img = np.asarray(images[0], dtype=np.float64)
    canon_depth = np.asarray(depths[0], dtype=np.float64)
    canon_pose = poses[0]
    canon_center = canon_pose.center
    scores = []
    for j in range(1, len(poses)):
        img = np.asarray(images[j], dtype=np.float64)
        dep = np.asarray(depths[j], dtype=np.float64)
        origins, dirs = camera_rays(poses[j], image_size)
        pts = origins + dep.reshape(-1, 1) * dirs
        uv, z = project_points(pts, canon_pose, image_size)
        inb = ((uv[:, 0] >= 0.5) & (uv[:, 0] <= image_size - 0.5)
               & (uv[:, 1] >= 0.5) & (uv[:, 1] <= image_size - 0.5) & (z > 0))
        fg = (dep.reshape(-1) < far * 0.999)
        cand = inb & fg
        if not cand.any():
            continue
        samp_col = bilinear_sample(canon_img, uv[cand])
        samp_dep = bilinear_sample(canon_depth[..., None], uv[cand])[:, 0]
        dist = np.linalg.norm(pts[cand] - canon_center, axis=1)
        consistent = np.abs(samp_dep - dist) <= depth_eps * dist
        if not consistent.any():
            continue
        pix = img.reshape(-1, 3)[cand][consistent]
        ref = samp_col[consistent]
        mse = np.mean((pix - ref) ** 2)
        scores.append(PSNR_CAP if mse == 0 else min(10 * np.log10(1 / mse), PSNR_CAP))
    if not scores:
        raise ValueError("empty co-visible region across all views")
    return float(np.mean(scores))


def reprojection_consistency(gen, w, poses, render: RenderConfig,
                             depth_eps: float = 0.02) -> float:
    """Renders every pose (with depth) from the generator and scores the
    canonical-view reprojection agreement. `w` may be a LatentCode or a
    whole InversionResult (whose tuned generator then takes precedence)."""
    from .inversion import InversionResult
    if isinstance(w, InversionResult):
        gen, w = w.tuned_generator, w.w_star
    pose_list = poses.poses if isinstance(poses, Trajectory) else list(poses)
    images, depths = [], []
    with torch.no_grad():
        for p in pose_list:
            out = gen.synthesize(w, p, render)
            images.append(out.image_np())
            depths.append(out.depth_np())
    return reprojection_consistency_images(
        images, depths, pose_list, render.image_size, far=render.far,
        depth_eps=depth_eps,
    )


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    scene_ids: list[str]
    per_scene: dict[str, dict[str, float]]  # id -> metric -> value
    aggregate: dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""

    def __post_init__(self):
        if not self.aggregate:
            keys = set()
            for v in self.per_scene.values():
                keys.update(v)
            self.aggregate = {
                k: float(np.mean([v[k] for v in self.per_scene.values() if k in v]))
                for k in sorted(keys)
            }

    def write_csv(self, path) -> None:
        keys = sorted(self.aggregate)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scene_id"] + keys)
            for sid in self.scene_ids:
                row = self.per_scene.get(sid, {})
                w.writerow([sid] + [row.get(k, "") for k in keys])
            w.writerow(["aggregate"] + [self.aggregate[k] for k in keys])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "scene_ids": self.scene_ids,
            "per_scene": self.per_scene,
            "aggregate": self.aggregate,
            "config_fingerprint": self.config_fingerprint,
        }, indent=1, sort_keys=True))
