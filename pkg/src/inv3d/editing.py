"""Latent attribute directions: score-ranked sample labeling, a linear
max-margin classifier, and additive latent edits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import CameraPose
from .generator import LatentCode, RenderConfig, TriplaneGenerator


@dataclass(frozen=True)
class AttributeDirection:
    direction: np.ndarray  # unit vector, flattened (L*d,) W+ space
    bias: float
    attribute_name: str
    test_accuracy: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d)
        if d.ndim != 1:
            raise ValueError("direction must be a flat vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be unit-norm")
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError("test_accuracy must be in [0, 1]")

    def score(self, w: LatentCode) -> float:
        return float(w.styles.detach().numpy().ravel() @ self.direction + self.bias)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "direction": self.direction.tolist(),
            "bias": self.bias,
            "attribute_name": self.attribute_name,
            "test_accuracy": self.test_accuracy,
        }))

    @classmethod
    def load(cls, path) -> "AttributeDirection":
        d = json.loads(Path(path).read_text())
        return cls(direction=np.asarray(d["direction"], dtype=np.float64),
                   bias=float(d["bias"]),
                   attribute_name=str(d["attribute_name"]),
                   test_accuracy=float(d["test_accuracy"]))


# -- toy attribute scorers ---------------------------------------------------------

def brightness_score(image: np.ndarray) -> float:
    return float(np.mean(image))


def hue_score(image: np.ndarray) -> float:
    """Red-vs-blue balance; crude stand-in for a hue attribute."""
    return float(np.mean(image[..., 0]) - np.mean(image[..., 2]))


def silhouette_area_score(image: np.ndarray, background=1.0, tol=0.05) -> float:
    dist = np.abs(image - background).max(axis=-1)
    return float(np.mean(dist > tol))


SCORERS = {
    "brightness": brightness_score,
    "hue": hue_score,
    "silhouette": silhouette_area_score,
}


# -- labeled set construction -------------------------------------------------------

CANONICAL_POSE = CameraPose(yaw=0.0, pitch=0.0, radius=2.6, fov_y=0.6)


def build_attribute_set(gen: TriplaneGenerator, scorer, n_samples: int,
                        k_extreme: int, seed: int = 0,
                        render: RenderConfig | None = None,
                        pose: CameraPose | None = None):
    """Samples n latents, renders the canonical view, scores each image, and
    keeps the k highest (+1) and k lowest (-1) scorers.

    Returns (latents (2k, L*d) float64, labels (2k,) int, scores (2k,)).
    """
    if n_samples < 2 * k_extreme:
        raise ValueError("n_samples must be >= 2 * k_extreme")
    render = render or RenderConfig()
    pose = pose or CANONICAL_POSE
    lats = np.empty((n_samples, gen.config.num_layers * gen.config.latent_dim))
    scores = np.empty(n_samples)
    with torch.no_grad():
        for i in range(n_samples):
            w = gen.sample_latent(seed=seed * 100003 + i, space="Wplus")
            img = gen.synthesize(w, pose, render).image_np()
            s = scorer(img)
            if not np.isfinite(s):
                raise ValueError(f"scorer returned non-finite value at sample {i}")
            lats[i] = w.styles.numpy().ravel()
            scores[i] = s
    order = np.argsort(scores, kind="stable")
    lo, hi = order[:k_extreme], order[-k_extreme:]
    keep = np.concatenate([lo, hi])
    labels = np.concatenate([-np.ones(k_extreme, int), np.ones(k_extreme, int)])
    return lats[keep], labels, scores[keep]


# -- linear max-margin fit ----------------------------------------------------------

def fit_direction(latents: np.ndarray, labels: np.ndarray,
                  attribute_name: str = "attr", train_fraction: float = 0.7,
                  seed: int = 0, reg: float = 1e-3, steps: int = 5000,
                  lr: float = 0.05) -> AttributeDirection:
    """Hinge loss + L2 regularization by sub-gradient descent; direction is
    the normalized weight vector, accuracy reported on the held-out split."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("latents and labels disagree")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("need both classes present")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_train = max(1, int(round(train_fraction * len(x))))
    tr, te = perm[:n_train], perm[n_train:]
    if not (np.any(y[tr] > 0) and np.any(y[tr] < 0)):
        raise ValueError("train split is single-class; adjust seed or fraction")

    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    xs = (x - mu) / sd
    w = np.zeros(x.shape[1])
    b = 0.0
    for step in range(steps):
        margins = y[tr] * (xs[tr] @ w + b)
        viol = margins < 1.0
        gw = reg * w - (y[tr][viol, None] * xs[tr][viol]).sum(axis=0) / len(tr)
        gb = -y[tr][viol].sum() / len(tr)
        eta = lr / (1.0 + 0.001 * step)
        w -= eta * gw
        b -= eta * gb

    # undo feature standardization so the direction lives in raw W+ coords
    w_raw = w / sd
    b_raw = b - float(mu @ w_raw)
    norm = np.linalg.norm(w_raw)
    if norm == 0:
        raise ValueError("degenerate classifier (zero weights)")
    if len(te):
        pred = np.sign(x[te] @ w_raw + b_raw)
        acc = float(np.mean(pred == y[te]))
    else:
        acc = 1.0
    return AttributeDirection(direction=w_raw / norm, bias=b_raw / norm,
                              attribute_name=attribute_name, test_accuracy=acc)


def apply_edit(w: LatentCode, direction: AttributeDirection, strength: float,
               layer_range: tuple[int, int] | None = None) -> LatentCode:
    """w' = w + strength * direction, optionally restricted to a contiguous
    row range [lo, hi) of the W+ matrix."""
    num_layers, dim = w.styles.shape
    d = direction.direction
    if d.size != num_layers * dim:
        raise ValueError(f"direction size {d.size} != latent size {num_layers * dim}")
    delta = torch.as_tensor(d.reshape(num_layers, dim), dtype=w.styles.dtype)
    if layer_range is not None:
        lo, hi = layer_range
        if not (0 <= lo < hi <= num_layers):
            raise ValueError(f"bad layer_range {layer_range}")
        keep = torch.zeros(num_layers, 1, dtype=w.styles.dtype)
        keep[lo:hi] = 1.0
        delta = delta * keep
    return LatentCode(styles=w.styles + strength * delta, space_tag="Wplus")
