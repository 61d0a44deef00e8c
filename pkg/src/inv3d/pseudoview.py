"""Occluded-part reconstruction and pseudo-view composition.

The warped texture covers what the input camera saw; everything else is
inpainted by the generative prior: a fresh latent is fitted to the input
restricted to its in-distribution pixels (difference map), rendered at the
novel pose, and blended with the warped texture under the feathered
visibility mask (convex blend or gradient-domain Poisson blend).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .camera import CameraPose
from .generator import LatentCode, RenderConfig, TriplaneGenerator
from .geometry import Mask
from .inversion import (OptimizerConfig, FeatureExtractor, NonFiniteLoss,
                        rec_loss, _default_extractor)
from . import pngio


@dataclass
class DifferenceMap:
    values: np.ndarray  # (H, W) binary
    theta: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isin(self.values, (0.0, 1.0)).all():
            raise ValueError("difference map must be binary")


@dataclass
class PseudoView:
    image: np.ndarray  # (H, W, 3) composed view
    visible_mask: Mask
    occluded_mask: Mask
    pose: CameraPose
    source: str = "blended"  # warp | generated | blended

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if not np.isfinite(self.image).all():
            raise ValueError("pseudo-view image must be finite")
        comp = self.visible_mask.values + self.occluded_mask.values
        if np.abs(comp - 1.0).max() > 1e-12:
            raise ValueError("visible and occluded masks must sum to 1")


@dataclass
class OccludedModel:
    z_o: LatentCode
    difference_map: DifferenceMap
    final_loss: float
    iterations: int


def difference_map(x: np.ndarray, recon: np.ndarray, theta: float) -> DifferenceMap:
    """Binary in-distribution map: 0 where the per-pixel rgb L2 distance
    exceeds theta (strictly), 1 elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if x.shape != recon.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {recon.shape}")
    dist = np.linalg.norm(x - recon, axis=-1)
    return DifferenceMap((dist <= theta).astype(np.float64), theta)


def adaptive_theta(x: np.ndarray, recon: np.ndarray, n_sigma: float = 2.0) -> float:
    """mu + n_sigma * sigma of the per-pixel distances."""
    dist = np.linalg.norm(np.asarray(x, float) - np.asarray(recon, float), axis=-1)
    return float(dist.mean() + n_sigma * dist.std())


def fit_occluded_latent(gen: TriplaneGenerator, x, d_map: DifferenceMap,
                        p_0: CameraPose, cfg: OptimizerConfig,
                        render: RenderConfig,
                        w_init: LatentCode | None = None,
                        extractor: FeatureExtractor | None = None) -> OccludedModel:
    """Fit a fresh latent to the in-distribution pixels of the input.

    The reconstruction loss is restricted to difference-map 1 pixels at the
    input pose; the generator stays frozen. Out-of-distribution pixels
    contribute exactly zero gradient.
    """
    if d_map.values.sum() == 0:
        raise ValueError("difference map is all zeros: nothing in-distribution")
    gen = copy.deepcopy(gen)
    x_t = torch.as_tensor(np.asarray(x), dtype=gen.dtype)
    start = w_init or gen.mean_wplus(1000, seed=cfg.seed)
    sub = copy.copy(cfg)
    sub.optimize_latent = True
    sub.optimize_generator = False
    sub.alpha = 0.0

    mask_t = torch.as_tensor(d_map.values, dtype=gen.dtype)
    z_o, history = _masked_latent_fit(gen, x_t, mask_t, p_0, sub, render,
                                      start, extractor)
    final = history[-1]["total"] if history else float("nan")
    return OccludedModel(z_o=z_o, difference_map=d_map,
                         final_loss=final, iterations=len(history))


def _masked_latent_fit(gen, x_t, mask_t, p_0, cfg, render, w_init, extractor):
    ex = extractor or _default_extractor(gen.dtype)
    w = w_init.styles.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.early_stop_lr, betas=(0.9, 0.999), eps=1e-8)
    weights = (cfg.l2_weight, cfg.perceptual_weight)
    history = []
    for it in range(cfg.early_stop_iterations):
        out = gen.synthesize(LatentCode(w, "Wplus"), p_0, render)
        loss = rec_loss(out.image, x_t, mask_t, weights, ex)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise NonFiniteLoss(f"non-finite masked loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"iteration": it, "total": val})
    return LatentCode(w.detach().clone(), "Wplus"), history


def render_occluded(gen: TriplaneGenerator, z_o, p_i: CameraPose,
                    render: RenderConfig) -> np.ndarray:
    """Generated content at any pose: a plain render of the fitted latent.
    Accepts a LatentCode or a whole OccludedModel."""
    if isinstance(z_o, OccludedModel):
        z_o = z_o.z_o
    with torch.no_grad():
        out = gen.synthesize(z_o, p_i, render)
    return out.image_np().astype(np.float64)


# -- blending -------------------------------------------------------------------


class PoissonSolveError(RuntimeError):
    pass


def compose_pseudo_view(v_i: np.ndarray, o_i: np.ndarray, m_v_soft: Mask,
                        pose: CameraPose, mode: str = "gaussian",
                        visible_raw: Mask | None = None) -> PseudoView:
    """Blend warped texture V_i with generated content O_i under the
    feathered visibility mask.

    gaussian: per-pixel convex combination m*V + (1-m)*O. poisson: solve the
    Poisson equation on the m < 0.5 region, guidance gradients taken from
    V_i where the warp defined it and from O_i elsewhere, boundary pinned to
    the gaussian composite. `visible_raw` marks where V_i carries real warped
    color; outside it V_i is replaced by O_i before blending so feathered
    mask weight never mixes in undefined pixels.
    """
    v_i = np.asarray(v_i, dtype=np.float64)
    o_i = np.asarray(o_i, dtype=np.float64)
    if v_i.shape != o_i.shape:
        raise ValueError("image shape mismatch")
    m = m_v_soft.values
    if m.shape != v_i.shape[:2]:
        raise ValueError("mask shape mismatch")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("mask out of range")

    if visible_raw is not None:
        defined = visible_raw.values[..., None] > 0
        v_eff = np.where(defined, v_i, o_i)
        v_defined = visible_raw.values > 0
    else:
        v_eff = v_i
        v_defined = np.ones(m.shape, dtype=bool)

    composite = m[..., None] * v_eff + (1.0 - m[..., None]) * o_i
    if mode == "gaussian":
        image = composite
        source = "blended"
    elif mode == "poisson":
        image = _poisson_blend(composite, v_eff, o_i, m, v_defined)
        source = "blended"
    else:
        raise ValueError(f"unknown blend mode {mode!r}")
    return PseudoView(
        image=np.clip(image, 0.0, 1.0),
        visible_mask=Mask(m.copy(), m_v_soft.kind),
        occluded_mask=Mask(1.0 - m, m_v_soft.kind),
        pose=pose,
        source=source,
    )


def _poisson_blend(composite, v_eff, o_i, m, v_defined,
                   residual_tol: float = 1e-5):
    """Membrane solve on the occluded region (soft mask < 0.5).

    Discrete 5-point Laplacian; guidance gradient of V where both endpoint
    pixels carry warped color, of O otherwise. Dirichlet values come from
    the gaussian composite. Verifies the residual of every solve.
    """
    h, w = m.shape
    region = m < 0.5
    if not region.any():
        return composite
    if region.all():
        # no Dirichlet boundary anywhere -> membrane problem is singular;
        # nothing visible to blend against, keep the composite as-is
        return composite
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(region)
    idx[ys, xs] = np.arange(len(ys))
    n = len(ys)
    guide = np.where((v_defined[..., None]), v_eff, o_i)

    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 3))
    for k in range(n):
        y, x = ys[k], xs[k]
        rows.append(k); cols.append(k); vals.append(4.0)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                # guidance gradient along this edge
                if v_defined[y, x] and v_defined[ny, nx]:
                    g = v_eff[y, x] - v_eff[ny, nx]
                else:
                    g = o_i[y, x] - o_i[ny, nx]
                rhs[k] += g
                if region[ny, nx]:
                    rows.append(k); cols.append(idx[ny, nx]); vals.append(-1.0)
                else:
                    rhs[k] += composite[ny, nx]
            else:
                rows.append(k); cols.append(k); vals.append(-1.0)  # Neumann at frame
    a_mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out = composite.copy()
    for c in range(3):
        u = spsolve(a_mat, rhs[:, c])
        resid = np.abs(a_mat @ u - rhs[:, c]).max()
        if resid > residual_tol:
            raise PoissonSolveError(f"poisson residual {resid:.2e} > {residual_tol}")
        out[ys, xs, c] = u
    return np.clip(out, 0.0, 1.0)


# -- persistence ------------------------------------------------------------------


def save_pseudo_view(dir_path, view: PseudoView, provenance: dict | None = None):
    """Bundle layout: image.png, mask_visible.png / mask_occluded.png
    (16-bit), pose.json, provenance.json."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    pngio.save_image_u8(d / "image.png", view.image)
    pngio.save_gray_u16(d / "mask_visible.png", view.visible_mask.values)
    pngio.save_gray_u16(d / "mask_occluded.png", view.occluded_mask.values)
    (d / "pose.json").write_text(json.dumps(view.pose.to_dict(), indent=1, sort_keys=True))
    prov = dict(provenance or {})
    prov.setdefault("source", view.source)
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True))


def load_pseudo_view(dir_path) -> PseudoView:
    d = Path(dir_path)
    image = pngio.load_image(d / "image.png").astype(np.float64)
    mv = pngio.load_gray_u16(d / "mask_visible.png").astype(np.float64)
    pose = CameraPose.from_dict(json.loads((d / "pose.json").read_text()))
    prov = json.loads((d / "provenance.json").read_text())
    # reconstruct the exact complement so the mask invariant holds after
    # 16-bit quantization
    return PseudoView(
        image=image,
        visible_mask=Mask(mv, "soft"),
        occluded_mask=Mask(1.0 - mv, "soft"),
        pose=pose,
        source=prov.get("source", "blended"),
    )


def latent_checksum(code: LatentCode) -> str:
    return hashlib.sha256(code.numpy().astype(np.float64).tobytes()).hexdigest()[:16]
