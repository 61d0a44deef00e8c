"""Auto-decoder training of the toy generator: jointly optimize shared
generator weights and one latent per training scene against posed views."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .generator import (
    GeneratorConfig,
    LatentCode,
    RenderConfig,
    TriplaneGenerator,
)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 5e-3
    latent_lr: float = 5e-3
    lr_decay: float = 0.1  # cosine-anneal to lr * lr_decay
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    log_every: int = 100


@dataclass
class ToyTrainResult:
    generator: TriplaneGenerator
    latents: dict[str, np.ndarray]  # scene id -> z (1, d)
    loss_history: list[float]

    def wplus(self, scene_id: str) -> LatentCode:
        z = LatentCode(torch.from_numpy(self.latents[scene_id]), "Z")
        return self.generator.map_to_wplus(z).detach()


def train_toy_generator(scenes: list[dict], cfg: TrainConfig,
                        generator: TriplaneGenerator | None = None,
                        init_latents: dict | None = None,
                        progress=None) -> ToyTrainResult:
    """Fit the generator to a multi-view scene set.

    Each step renders one (scene, view) pair, drawn from a seeded stream, and
    descends the mean squared image error with Adam over generator weights
    and per-scene Z latents. Pass `generator`/`init_latents` to resume.
    """
    if not scenes:
        raise ValueError("empty dataset")
    for s in scenes:
        if len(s["poses"]) < 4:
            raise ValueError(f"scene {s['id']} has fewer than 4 views")
    data_size = scenes[0]["images"].shape[1]
    if cfg.render.image_size != data_size:
        cfg = replace(cfg, render=replace(cfg.render, image_size=data_size))

    gen = generator or TriplaneGenerator(cfg.generator, seed=cfg.seed)
    d = gen.config.latent_dim
    torch_gen = torch.Generator().manual_seed(cfg.seed + 1)
    latents = {}
    for s in scenes:
        if init_latents and s["id"] in init_latents:
            z = torch.from_numpy(np.asarray(init_latents[s["id"]])).to(torch.float32)
        else:
            z = torch.randn(1, d, generator=torch_gen) * 0.5
        latents[s["id"]] = z.clone().requires_grad_(True)

    opt = torch.optim.Adam(
        [
            {"params": list(gen.parameters()), "lr": cfg.lr},
            {"params": list(latents.values()), "lr": cfg.latent_lr},
        ],
        betas=(0.9, 0.999),
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(cfg.steps, 1), eta_min=cfg.lr * cfg.lr_decay
    )
    rng = np.random.default_rng(cfg.seed + 2)
    targets = {
        s["id"]: torch.from_numpy(s["images"]).to(torch.float32) for s in scenes
    }

    history: list[float] = []
    for step in range(cfg.steps):
        s = scenes[rng.integers(len(scenes))]
        v = int(rng.integers(len(s["poses"])))
        w = gen.map_to_wplus(LatentCode(latents[s["id"]], "Z"))
        out = gen.synthesize(w, s["poses"][v], cfg.render)
        loss = (out.image - targets[s["id"]][v]).square().mean()
        if not torch.isfinite(loss):
            raise TrainingDivergence(
                f"non-finite loss at step {step} (scene {s['id']}, view {v})"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
        if progress and (step + 1) % cfg.log_every == 0:
            progress(step + 1, float(np.mean(history[-cfg.log_every:])))

    return ToyTrainResult(
        generator=gen,
        latents={k: v.detach().numpy() for k, v in latents.items()},
        loss_history=history,
    )
