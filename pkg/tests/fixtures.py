"""Shared heavyweight fixtures: a procedural training set, a trained toy
generator checkpoint, and a held-out benchmark set, cached on disk under
tests/_cache so the suite only pays the training cost once."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

from inv3d.generator import RenderConfig, load_checkpoint, save_checkpoint
from inv3d.scenes import generate_dataset, load_dataset
from inv3d.training import TrainConfig, train_toy_generator

CACHE = Path(__file__).parent / "_cache"

TRAIN_SEED = 101
TRAIN_SCENES = 16
TRAIN_VIEWS = 8
TRAIN_STEPS = 6000
BENCH_SEED = 202
BENCH_SCENES = 20
BENCH_VIEWS = 6

FIXTURE_TAG = {
    "train_seed": TRAIN_SEED, "train_scenes": TRAIN_SCENES,
    "train_views": TRAIN_VIEWS, "train_steps": TRAIN_STEPS,
    "bench_seed": BENCH_SEED, "bench_scenes": BENCH_SCENES,
    "bench_views": BENCH_VIEWS, "version": 3,
}


def _tag_ok(path: Path) -> bool:
    try:
        return json.loads(path.read_text()) == FIXTURE_TAG
    except (OSError, json.JSONDecodeError):
        return False


def _dataset_ok(root: Path, tag: Path) -> bool:
    return (root / "manifest.json").exists() and _tag_ok(tag)


def ensure_train_dataset() -> Path:
    """Striped scenes only: the prior learns the stripe texture family."""
    root = CACHE / "train_data"
    tag = CACHE / "train_data.tag.json"
    if not _dataset_ok(root, tag):
        shutil.rmtree(root, ignore_errors=True)
        generate_dataset(root, TRAIN_SCENES, TRAIN_VIEWS, TRAIN_SEED,
                         image_size=64, textured=True,
                         texture_kinds=("stripes",))
        tag.write_text(json.dumps(FIXTURE_TAG))
    return root


def ensure_bench_dataset() -> Path:
    """Held-out scenes; spot textures are a family the prior never saw."""
    root = CACHE / "bench_data"
    tag = CACHE / "bench_data.tag.json"
    if not _dataset_ok(root, tag):
        shutil.rmtree(root, ignore_errors=True)
        generate_dataset(root, BENCH_SCENES, BENCH_VIEWS, BENCH_SEED,
                         image_size=64, textured=True)
        tag.write_text(json.dumps(FIXTURE_TAG))
    return root


def ensure_toy_checkpoint(progress=None) -> Path:
    ckpt = CACHE / "toy.npz"
    tag = CACHE / "toy.tag.json"
    if ckpt.exists() and _tag_ok(tag):
        return ckpt
    root = ensure_train_dataset()
    _, scenes = load_dataset(root)
    cfg = TrainConfig(steps=TRAIN_STEPS, seed=0,
                      render=RenderConfig(image_size=64, samples_per_ray=24))
    result = train_toy_generator(scenes, cfg, progress=progress)
    CACHE.mkdir(exist_ok=True)
    save_checkpoint(ckpt, result.generator, latents=result.latents,
                    extra={"final_loss": result.loss_history[-1]})
    tag.write_text(json.dumps(FIXTURE_TAG))
    return ckpt


def load_toy_generator():
    gen, latents, meta = load_checkpoint(ensure_toy_checkpoint())
    return gen, latents, meta
