"""Optimization engine: reconstruction loss, early-stop inversion, auxiliary
pose sampling, and pivotal joint optimization over input + pseudo-views.

Two-stage scheme: stage 1 descends the latent only and stops early, giving a
coarse code whose geometry is trusted; stage 2 freezes that code as a pivot
and fine-tunes the generator weights against the input view plus the
synthesized pseudo-views, one auxiliary view drawn per iteration.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraPose
from .generator import LatentCode, RenderConfig, TriplaneGenerator


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-4
    iterations: int = 3000
    l2_weight: float = 1.0
    perceptual_weight: float = 1.0
    alpha: float = 1.0  # pseudo-view loss weight
    occluded_weight: float = 1.0  # relative weight of the two pseudo terms
    visible_weight: float = 1.0
    seed: int = 0
    optimize_generator: bool = True
    optimize_latent: bool = False
    early_stop_iterations: int = 1000
    early_stop_lr: float = 5e-3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.l2_weight, self.perceptual_weight, self.alpha,
               self.occluded_weight, self.visible_weight) < 0:
            raise ValueError("weights must be nonnegative")


@dataclass
class InversionResult:
    w_star: LatentCode
    tuned_generator: TriplaneGenerator
    loss_history: list[dict]  # per-iteration: total + per-term breakdown
    pseudo_views_used: list


class FeatureExtractor:
    """Fixed multi-scale convolutional features for perceptual distance.

    A seeded two-layer conv stack evaluated at three dyadic scales. Weights
    are frozen at construction; no pretrained network involved, so the
    distance is a lightweight perceptual proxy rather than LPIPS itself.
    """

    def __init__(self, seed: int = 0, channels: int = 12, scales: int = 3):
        g = torch.Generator().manual_seed(seed)
        self.scales = scales
        k1 = torch.randn(channels, 3, 3, 3, generator=g)
        self.k1 = k1 / k1.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
        k2 = torch.randn(channels, channels, 3, 3, generator=g)
        self.k2 = k2 / k2.flatten(1).norm(dim=1).view(-1, 1, 1, 1)

    def __call__(self, image: torch.Tensor) -> list[torch.Tensor]:
        """image (H, W, 3) -> list of feature tensors, one per scale."""
        x = image.permute(2, 0, 1).unsqueeze(0)
        feats = []
        for s in range(self.scales):
            h = F.conv2d(x, self.k1.to(x.dtype), padding=1)
            h = F.conv2d(F.relu(h), self.k2.to(x.dtype), padding=1)
            feats.append(h)
            if s + 1 < self.scales:
                x = F.avg_pool2d(x, 2)
        return feats


def rec_loss(pred: torch.Tensor, target: torch.Tensor, mask=None,
             weights: tuple[float, float] = (1.0, 1.0),
             extractor: FeatureExtractor | None = None) -> torch.Tensor:
    """Weighted sum of masked L2 and multi-scale feature distance.

    l2_w * mean((mask*(pred-target))^2)
      + perc_w * sum_scales mean((F(mask*pred) - F(mask*target))^2)

    The mask multiplies both images before feature extraction, so fully
    masked-out pixels contribute exactly zero loss and zero gradient.
    """
    l2_w, perc_w = weights
    if l2_w < 0 or perc_w < 0:
        raise ValueError("negative loss weights")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mask is not None:
        m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask,
                            dtype=pred.dtype)
        if m.ndim == 2:
            m = m.unsqueeze(-1)
        pred = pred * m
        target = target * m
    loss = l2_w * (pred - target).square().mean()
    if perc_w > 0:
        ex = extractor or _default_extractor(pred.dtype)
        fa = ex(pred)
        fb = ex(target)
        for a, b in zip(fa, fb):
            loss = loss + perc_w * (a - b).square().mean()
    return loss


_EXTRACTORS: dict = {}


def _default_extractor(dtype) -> FeatureExtractor:
    key = ("default", dtype)
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = FeatureExtractor(seed=0)
    return _EXTRACTORS[key]


# -- pose sampling ---------------------------------------------------------------

YAW_RANGE = (-0.35, 0.35)
PITCH_RANGE = (-0.25, 0.25)


def sample_aux_poses(n: int, yaw_range=YAW_RANGE, pitch_range=PITCH_RANGE,
                     strategy: str = "grid", seed: int = 0,
                     radius: float = 2.6, fov_y: float = 0.6) -> list[CameraPose]:
    """Auxiliary camera poses inside the yaw/pitch box.

    grid: canonical view first, then the four range corners, then seeded
    uniform fill; uniform: all seeded uniform draws. n=1 always returns the
    canonical pose.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    y0, y1 = yaw_range
    p0, p1 = pitch_range
    if n > 1 and (y0 == y1 and p0 == p1):
        raise ValueError("empty ranges with n > 1")

    def mk(yaw, pitch):
        return CameraPose(yaw=yaw, pitch=pitch, radius=radius, fov_y=fov_y)

    rng = np.random.default_rng(seed)
    poses: list[CameraPose] = []
    if strategy == "grid":
        fixed = [(0.0, 0.0), (y0, p0), (y0, p1), (y1, p0), (y1, p1)]
        for yaw, pitch in fixed[:n]:
            poses.append(mk(yaw, pitch))
        while len(poses) < n:
            poses.append(mk(float(rng.uniform(y0, y1)), float(rng.uniform(p0, p1))))
    elif strategy == "uniform":
        if n == 1:
            return [mk(0.0, 0.0)]
        for _ in range(n):
            poses.append(mk(float(rng.uniform(y0, y1)), float(rng.uniform(p0, p1))))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return poses


# -- optimization loops -----------------------------------------------------------


class NonFiniteLoss(RuntimeError):
    pass


def _optimize(gen: TriplaneGenerator, x: torch.Tensor, p_0: CameraPose,
              pseudo_views: list, cfg: OptimizerConfig, render: RenderConfig,
              w_init: LatentCode, lr: float, iterations: int,
              extractor: FeatureExtractor | None = None,
              density_reg=None, callback=None):
    """Shared descent loop behind invert_initial and invert_pivotal.

    Per iteration: L = rec(G(w, p_0), x)
                     + alpha * [rec(M_o*G(w, p_i), M_o*O_i)
                                + rec(M_v*G(w, p_i), M_v*V_i)]
    with one pseudo-view i drawn uniformly per iteration (seeded stream).
    With alpha = 0 (or no views) no draw happens and the objective reduces
    to the single-view term exactly. `density_reg` = (points, reference,
    weight) replaces the pseudo terms with a density-matching penalty.
    """
    weights = (cfg.l2_weight, cfg.perceptual_weight)
    ex = extractor or _default_extractor(gen.dtype)
    w = w_init.styles.detach().clone().requires_grad_(cfg.optimize_latent or not cfg.optimize_generator)
    params = []
    if cfg.optimize_generator:
        params += list(gen.parameters())
    if w.requires_grad:
        params.append(w)
    if not params:
        raise ValueError("nothing to optimize: enable generator or latent")
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)

    use_views = cfg.alpha > 0 and len(pseudo_views) > 0
    if cfg.alpha > 0 and not pseudo_views and density_reg is None:
        raise ValueError("alpha > 0 requires pseudo views")
    if density_reg is not None:
        reg_pts, reg_ref, reg_weight = density_reg
        reg_pts = torch.as_tensor(np.asarray(reg_pts), dtype=gen.dtype).view(-1, 3)
        reg_ref = torch.as_tensor(np.asarray(reg_ref), dtype=gen.dtype).view(-1)
        if reg_pts.shape[0] != reg_ref.shape[0]:
            raise ValueError("density reference grid shape mismatch")

    history: list[dict] = []
    for it in range(iterations):
        code = LatentCode(w, "Wplus")
        out = gen.synthesize(code, p_0, render)
        input_term = rec_loss(out.image, x, None, weights, ex)
        record = {"iteration": it, "input": float(input_term.detach())}
        loss = input_term
        if use_views:
            i = int(rng.integers(len(pseudo_views)))
            pv = pseudo_views[i]
            if pv.image.shape[0] != render.image_size:
                raise ValueError("pseudo-view resolution mismatch")
            out_i = gen.synthesize(code, pv.pose, render)
            target = torch.as_tensor(pv.image, dtype=gen.dtype)
            occ = rec_loss(out_i.image, target, pv.occluded_mask.values, weights, ex)
            vis = rec_loss(out_i.image, target, pv.visible_mask.values, weights, ex)
            loss = loss + cfg.alpha * (cfg.occluded_weight * occ
                                       + cfg.visible_weight * vis)
            record.update({"view_index": i,
                           "occluded": float(occ.detach()),
                           "visible": float(vis.detach())})
        if density_reg is not None:
            dens = gen.query_density(code, reg_pts)
            reg = reg_weight * (dens - reg_ref).square().mean()
            loss = loss + reg
            record["density_reg"] = float(reg.detach())
        # recorded total = float64 sum of recorded terms, so the logged
        # decomposition is exact (the float32 tensor total differs by ~1e-7)
        record["total"] = (record["input"]
                           + cfg.alpha * (cfg.occluded_weight * record.get("occluded", 0.0)
                                          + cfg.visible_weight * record.get("visible", 0.0))
                           + record.get("density_reg", 0.0))
        if not math.isfinite(record["total"]):
            raise NonFiniteLoss(f"non-finite loss at iteration {it}: {record}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(record)
        if callback:
            callback(it, record, gen, LatentCode(w.detach(), "Wplus"))
    return LatentCode(w.detach().clone(), "Wplus"), history


def invert_initial(gen: TriplaneGenerator, x, p_0: CameraPose,
                   cfg: OptimizerConfig, render: RenderConfig,
                   w_init: LatentCode | None = None,
                   extractor: FeatureExtractor | None = None,
                   callback=None) -> tuple[LatentCode, list[dict]]:
    """Stage 1: early-stopped latent-only inversion of the input view.

    Returns the coarse code z_e and the loss history. Starts from the mean
    of 1000 mapped latent samples unless `w_init` is given; the generator
    stays frozen.
    """
    x_t = torch.as_tensor(np.asarray(x), dtype=gen.dtype)
    gen = copy.deepcopy(gen)  # frozen copy; optimizer must not touch caller's
    start = w_init or gen.mean_wplus(1000, seed=cfg.seed)
    sub = copy.copy(cfg)
    sub.optimize_latent = True
    sub.optimize_generator = False
    sub.alpha = 0.0
    w, history = _optimize(
        gen, x_t, p_0, [], sub, render, start,
        lr=cfg.early_stop_lr, iterations=cfg.early_stop_iterations,
        extractor=extractor, callback=callback,
    )
    return w, history


def invert_pivotal(gen: TriplaneGenerator, x, p_0: CameraPose,
                   pseudo_views: list, cfg: OptimizerConfig,
                   render: RenderConfig, w_init: LatentCode,
                   extractor: FeatureExtractor | None = None,
                   density_reg=None, callback=None) -> InversionResult:
    """Stage 2: pivotal tuning around the stage-1 code.

    Default: the latent stays pinned at `w_init` and the generator weights
    descend the joint objective over the input view and one randomly drawn
    pseudo-view per iteration. Set cfg.optimize_latent for joint w+G.
    """
    tuned = copy.deepcopy(gen)
    x_t = torch.as_tensor(np.asarray(x), dtype=tuned.dtype)
    w, history = _optimize(
        tuned, x_t, p_0, pseudo_views, cfg, render, w_init,
        lr=cfg.learning_rate, iterations=cfg.iterations,
        extractor=extractor, density_reg=density_reg, callback=callback,
    )
    return InversionResult(
        w_star=w,
        tuned_generator=tuned,
        loss_history=history,
        pseudo_views_used=list(pseudo_views),
    )


def density_regularizer(gen: TriplaneGenerator, w: LatentCode, grid_points,
                        reference, weight: float) -> torch.Tensor:
    """weight * mean((density(points) - reference)^2); the ablation that
    anchors geometry instead of supervising pseudo-views."""
    pts = torch.as_tensor(np.asarray(grid_points), dtype=gen.dtype).view(-1, 3)
    ref = torch.as_tensor(np.asarray(reference), dtype=gen.dtype).view(-1)
    if pts.shape[0] != ref.shape[0]:
        raise ValueError("reference grid shape mismatch")
    if weight == 0:
        return torch.zeros((), dtype=gen.dtype)
    dens = gen.query_density(w, pts)
    return weight * (dens - ref).square().mean()
