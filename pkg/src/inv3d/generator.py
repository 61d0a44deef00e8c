"""Toy 3D-aware triplane generator.

latent -> per-layer styles -> three feature planes -> (density, rgb) field
-> volume-rendered image at a camera pose. Small enough to train in minutes
on CPU while keeping the structure the inversion pipeline depends on:
a mapping network, a W+ style stack, a triplane field, and an
emission-absorption renderer that is differentiable end to end.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraPose, camera_rays

LATENT_SPACES = ("Z", "W", "Wplus")

CHECKPOINT_VERSION = 1


class LatentSpaceError(ValueError):
    pass


@dataclass
class LatentCode:
    """Style stack: (L, d) matrix, one row per generator layer.

    space_tag "Z" is a raw gaussian sample (single row); "Wplus" carries one
    (possibly distinct) style per layer.
    """

    styles: torch.Tensor
    space_tag: str = "Wplus"

    def __post_init__(self):
        if self.space_tag not in LATENT_SPACES:
            raise LatentSpaceError(f"unknown latent space {self.space_tag!r}")
        if not isinstance(self.styles, torch.Tensor):
            self.styles = torch.as_tensor(np.asarray(self.styles), dtype=torch.float32)
        if self.styles.ndim != 2:
            raise ValueError("styles must be (L, d)")
        if self.space_tag == "Z" and self.styles.shape[0] != 1:
            raise ValueError("Z codes have a single row")
        if not torch.isfinite(self.styles).all():
            raise ValueError("latent entries must be finite")

    @property
    def num_layers(self) -> int:
        return self.styles.shape[0]

    @property
    def dim(self) -> int:
        return self.styles.shape[1]

    def detach(self) -> "LatentCode":
        return LatentCode(self.styles.detach().clone(), self.space_tag)

    def numpy(self) -> np.ndarray:
        return self.styles.detach().cpu().numpy()


@dataclass
class RenderConfig:
    image_size: int = 64
    samples_per_ray: int = 24
    near: float = 1.5
    far: float = 3.7
    ray_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not self.near < self.far:
            raise ValueError("near must be < far")


@dataclass
class RenderOutput:
    """image (H,W,3) in [0,1]; depth (H,W) = expected ray-termination
    distance along the unit-norm ray, background-filled with `far`;
    opacity (H,W) = accumulated compositing weight."""

    image: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor

    def image_np(self) -> np.ndarray:
        return self.image.detach().cpu().numpy()

    def depth_np(self) -> np.ndarray:
        return self.depth.detach().cpu().numpy()

    def opacity_np(self) -> np.ndarray:
        return self.opacity.detach().cpu().numpy()


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    num_layers: int = 4
    plane_res: int = 32
    plane_channels: int = 16
    decoder_hidden: int = 64
    background_color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.plane_res < 8:
            raise ValueError("plane_res must be >= 8")
        if self.num_layers < 4:
            raise ValueError("need at least 4 style layers (3 planes + decoder)")
        self.background_color = tuple(float(c) for c in self.background_color)


def _fill_params(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        if p.ndim >= 2:
            fan_in = p.shape[1]
            std = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) * std)
        else:
            with torch.no_grad():
                p.zero_()


class TriplaneGenerator(nn.Module):
    """The trainable generator G. Styles 0..2 drive the three feature
    planes; the last style row conditions the decoder."""

    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        d, r, c, h = cfg.latent_dim, cfg.plane_res, cfg.plane_channels, cfg.decoder_hidden

        self.mapping = nn.Sequential(
            nn.Linear(d, d), nn.LeakyReLU(0.2), nn.Linear(d, d)
        )
        self.plane_heads = nn.ModuleList(
            [nn.Linear(d, r * r * c) for _ in range(3)]
        )
        # the last style row enters as an additive bias on the first
        # decoder layer (cheaper than concatenating per sample point)
        self.style_to_hidden = nn.Linear(d, h)
        self.dec_in = nn.Linear(c, h)
        self.dec_mid = nn.Linear(h, h)
        self.dec_out = nn.Linear(h, 4)
        self.register_buffer(
            "background", torch.tensor(cfg.background_color, dtype=torch.float32)
        )
        _fill_params(self, seed)
        with torch.no_grad():
            # start mostly transparent: softplus(-2) is a thin initial haze
            self.dec_out.bias[0] = -2.0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def check_finite(self):
        # sum-based single-pass check: any nan/inf entry makes the sum
        # non-finite (opposite-sign infs produce nan)
        for name, p in self.named_parameters():
            if not torch.isfinite(p.detach().sum()):
                raise ValueError(f"non-finite generator parameter: {name}")

    # -- latent handling ---------------------------------------------------

    def map_to_wplus(self, z: LatentCode) -> LatentCode:
        """Mapping network Z -> W, broadcast to all L layers (W+)."""
        if z.space_tag != "Z":
            raise LatentSpaceError(f"map_to_wplus expects a Z code, got {z.space_tag}")
        w = self.mapping(z.styles.to(self.dtype))
        styles = w.expand(self.config.num_layers, -1)
        return LatentCode(styles, "Wplus")

    def sample_latent(self, seed: int, space: str = "Z") -> LatentCode:
        if space not in ("Z", "Wplus"):
            raise LatentSpaceError(f"cannot sample space {space!r}")
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(1, self.config.latent_dim, generator=gen, dtype=self.dtype)
        code = LatentCode(z, "Z")
        if space == "Z":
            return code
        return LatentCode(self.map_to_wplus(code).styles.detach(), "Wplus")

    def mean_wplus(self, n: int = 1000, seed: int = 0) -> LatentCode:
        """Mean of n mapped latent samples; the standard inversion start."""
        gen = torch.Generator().manual_seed(seed)
        zs = torch.randn(n, self.config.latent_dim, generator=gen, dtype=self.dtype)
        with torch.no_grad():
            ws = self.mapping(zs).mean(dim=0, keepdim=True)
        return LatentCode(ws.expand(self.config.num_layers, -1).clone(), "Wplus")

    # -- field -------------------------------------------------------------

    def planes(self, w: LatentCode) -> torch.Tensor:
        """(3, C, R, R) feature planes from the first three style rows."""
        cfg = self.config
        styles = w.styles.to(self.dtype)
        outs = [
            head(styles[i]).view(cfg.plane_channels, cfg.plane_res, cfg.plane_res)
            for i, head in enumerate(self.plane_heads)
        ]
        return torch.stack(outs, dim=0)

    def field(self, planes: torch.Tensor, style_last: torch.Tensor, points: torch.Tensor):
        """(density, rgb) at `points` (N, 3). Zero plane features outside
        [-1, 1]^3 so the density support is bounded."""
        feats = sample_triplane(planes, points)
        h = F.relu(self.dec_in(feats) + self.style_to_hidden(style_last))
        raw = self.dec_out(F.relu(self.dec_mid(h)))
        density = F.softplus(raw[:, 0])
        rgb = torch.sigmoid(raw[:, 1:4])
        return density, rgb

    def query_density(self, w: LatentCode, points: torch.Tensor | np.ndarray) -> torch.Tensor:
        if isinstance(points, torch.Tensor):
            pts = points.to(self.dtype)
        else:
            pts = torch.as_tensor(np.asarray(points), dtype=self.dtype)
        if not torch.isfinite(pts).all():
            raise ValueError("query points must be finite")
        planes = self.planes(w)
        density, _ = self.field(planes, w.styles[-1].to(self.dtype), pts.view(-1, 3))
        return density.view(pts.shape[:-1])

    # -- rendering ----------------------------------------------------------

    def synthesize(self, w: LatentCode, pose: CameraPose, cfg: RenderConfig) -> RenderOutput:
        if w.space_tag != "Wplus":
            raise LatentSpaceError("synthesize expects a Wplus code")
        if w.num_layers != self.config.num_layers:
            raise ValueError("style layer count mismatch")
        self.check_finite()

        n, hw = cfg.samples_per_ray, cfg.image_size
        origins, dirs = camera_rays(pose, hw)
        origins = torch.tensor(origins, dtype=self.dtype)
        dirs = torch.tensor(dirs, dtype=self.dtype)

        step = (cfg.far - cfg.near) / n
        t_mid = cfg.near + (torch.arange(n, dtype=self.dtype) + 0.5) * step
        t = t_mid.expand(hw * hw, n)
        if cfg.ray_jitter:
            g = torch.Generator().manual_seed(cfg.seed)
            jitter = (torch.rand(hw * hw, n, generator=g, dtype=self.dtype) - 0.5) * step
            t = t + jitter

        pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        planes = self.planes(w)
        density, rgb = self.field(planes, w.styles[-1].to(self.dtype), pts.reshape(-1, 3))
        density = density.view(hw * hw, n)
        rgb = rgb.view(hw * hw, n, 3)

        image, depth, opacity = volume_render(
            density, rgb, step, background=self.background.to(self.dtype),
            t=t, far=cfg.far
        )
        return RenderOutput(
            image=image.view(hw, hw, 3),
            depth=depth.view(hw, hw),
            opacity=opacity.view(hw, hw),
        )


def sample_triplane(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sum of bilinearly sampled features from the xy/xz/yz planes.

    planes: (3, C, R, R); points: (N, 3) in scene coordinates. Features are
    zero-padded outside [-1, 1] along every axis (out-of-bounds taps
    contribute nothing), so the field has bounded support.
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    grid = torch.stack(
        [torch.stack([x, y], dim=-1),
         torch.stack([x, z], dim=-1),
         torch.stack([y, z], dim=-1)], dim=0
    ).unsqueeze(1)  # (3, 1, N, 2)
    feats = F.grid_sample(planes, grid, mode="bilinear",
                          padding_mode="zeros", align_corners=True)
    return feats[:, :, 0, :].sum(dim=0).T  # (N, C)


def sample_triplane_reference(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Plain-python bilinear taps; slow reference for the fast path above."""
    r = planes.shape[-1]
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    coords = ((x, y), (x, z), (y, z))
    total = None
    for plane, (u_c, v_c) in zip(planes, coords):
        u = (u_c + 1.0) * 0.5 * (r - 1)
        v = (v_c + 1.0) * 0.5 * (r - 1)
        feat = _bilinear_padded(plane, u, v)
        total = feat if total is None else total + feat
    return total


def _bilinear_padded(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of (C, R, R) at continuous (u, v); zero outside."""
    r = plane.shape[-1]
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    out = 0.0
    flat = plane.reshape(plane.shape[0], -1)  # (C, R*R)
    for du in (0, 1):
        for dv in (0, 1):
            ui = u0 + du
            vi = v0 + dv
            wu = 1.0 - torch.abs(u - ui)
            wv = 1.0 - torch.abs(v - vi)
            weight = wu * wv
            valid = (ui >= 0) & (ui <= r - 1) & (vi >= 0) & (vi <= r - 1)
            idx = (vi.clamp(0, r - 1) * r + ui.clamp(0, r - 1)).long()
            tap = flat[:, idx].T  # (N, C)
            out = out + tap * (weight * valid.to(plane.dtype)).unsqueeze(1)
    return out


def volume_render(densities, colors, deltas, background=None, t=None, far=None):
    """Emission-absorption compositing along rays.

    densities: (..., K) nonnegative; colors: (..., K, 3); deltas: scalar or
    (..., K) positive step lengths. alpha_k = 1 - exp(-sigma_k * delta_k),
    weight_k = alpha_k * prod_{j<k}(1 - alpha_j). Returns (rgb, depth,
    opacity); rgb composites over `background` (default black), depth is the
    weight-averaged sample position t (default: running midpoint of deltas)
    with the residual transmittance assigned to `far`.
    """
    densities = torch.as_tensor(densities)
    colors = torch.as_tensor(colors, dtype=densities.dtype)
    deltas_t = torch.as_tensor(deltas, dtype=densities.dtype)
    if deltas_t.ndim == 0:
        deltas_t = deltas_t.expand(densities.shape)
    if densities.shape != deltas_t.shape:
        raise ValueError("densities and deltas must have equal shapes")
    if colors.shape[:-1] != densities.shape or colors.shape[-1] != 3:
        raise ValueError("colors must be densities.shape + (3,)")
    if (densities < 0).any():
        raise ValueError("negative density")
    if (deltas_t <= 0).any():
        raise ValueError("deltas must be positive")

    alpha = 1.0 - torch.exp(-densities * deltas_t)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha], dim=-1), dim=-1
    )[..., :-1]
    weights = alpha * trans
    opacity = weights.sum(dim=-1)

    if background is None:
        background = torch.zeros(3, dtype=densities.dtype)
    background = torch.as_tensor(background, dtype=densities.dtype)
    rgb = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    rgb = rgb + (1.0 - opacity).unsqueeze(-1) * background

    if t is None:
        t = torch.cumsum(deltas_t, dim=-1) - deltas_t * 0.5
    t = torch.as_tensor(t, dtype=densities.dtype)
    if far is None:
        far = (t[..., -1] + deltas_t[..., -1] * 0.5).max().item()
    depth = (weights * t).sum(dim=-1) + (1.0 - opacity) * far
    return rgb, depth, opacity


# -- module-level wrappers matching the operation surface ---------------------


def sample_latent(gen: TriplaneGenerator, seed: int, space: str = "Z") -> LatentCode:
    return gen.sample_latent(seed, space)


def map_to_wplus(gen: TriplaneGenerator, z: LatentCode) -> LatentCode:
    return gen.map_to_wplus(z)


def synthesize(gen: TriplaneGenerator, w: LatentCode, pose: CameraPose,
               cfg: RenderConfig) -> RenderOutput:
    return gen.synthesize(w, pose, cfg)


def query_density(gen: TriplaneGenerator, w: LatentCode, points) -> torch.Tensor:
    return gen.query_density(w, points)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, gen: TriplaneGenerator, latents: dict | None = None,
                    extra: dict | None = None) -> None:
    """Versioned npz container: config + hyperparameters as JSON metadata,
    every parameter tensor as-is. Round-trips bit-exactly."""
    arrays = {}
    for name, p in gen.state_dict().items():
        arrays["param/" + name] = p.detach().cpu().numpy()
    if latents:
        for key, val in latents.items():
            arrays["latent/" + key] = np.asarray(val)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(gen.config),
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns (generator, latents dict, meta dict)."""
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {meta.get('format_version')}")
    cfg_d = dict(meta["config"])
    cfg_d["background_color"] = tuple(cfg_d["background_color"])
    gen = TriplaneGenerator(GeneratorConfig(**cfg_d))
    state = {
        name[len("param/"):]: torch.from_numpy(data[name].copy())
        for name in data.files if name.startswith("param/")
    }
    gen.load_state_dict(state)
    latents = {
        name[len("latent/"):]: data[name].copy()
        for name in data.files if name.startswith("latent/")
    }
    return gen, latents, meta
