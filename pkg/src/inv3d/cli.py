"""Command-line surface: dataset generation, toy training, inversion runs,
trajectory rendering, editing, direction fitting, and evaluation."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import pngio, report
from .camera import CameraPose
from .editing import SCORERS, AttributeDirection, apply_edit, \
    build_attribute_set, fit_direction
from .evaluation import MetricReport, perceptual_distance, psnr, \
    reprojection_consistency_images, sphere_trajectory, ssim
from .generator import LatentCode, load_checkpoint, save_checkpoint
from .pipeline import RunConfig, StageError, load_run, run_inversion
from .scenes import DatasetError, generate_dataset, load_dataset, render_scene
from .training import TrainConfig, TrainingDivergence, train_toy_generator

EXIT_DATA_ERROR = 2
EXIT_MISSING_INPUT = 10
STAGE_EXIT_CODES = {"stage1": 11, "mesh": 12, "pseudo": 13, "stage2": 14}

CHECKPOINT_DIR_ENV = "INV3D_CHECKPOINT_DIR"


def _resolve_checkpoint(path: str) -> Path:
    """Bare filenames are looked up under $INV3D_CHECKPOINT_DIR."""
    p = Path(path)
    if not p.exists() and not p.is_absolute() and len(p.parts) == 1:
        base = os.environ.get(CHECKPOINT_DIR_ENV)
        if base and (Path(base) / p).exists():
            return Path(base) / p
    return p


@click.group()
def main():
    """3D-aware GAN inversion toolkit: invert single views into latent codes
    and tuned generators via pseudo-multi-view supervision."""


@main.command("gen-data")
@click.option("--n-scenes", default=20, show_default=True)
@click.option("--views", "views_per_scene", default=12, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--textured/--plain", default=False, show_default=True,
              help="Add stripe/spot surface patterns (out-of-distribution "
              "texture analog).")
@click.option("--image-size", default=64, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_gen_data(n_scenes, views_per_scene, seed, textured, image_size, out_dir):
    """Render a procedural multi-view dataset with exact ground truth."""
    manifest = generate_dataset(out_dir, n_scenes, views_per_scene, seed,
                                image_size=image_size, textured=textured)
    click.echo(f"wrote {manifest['n_scenes']} scenes x "
               f"{manifest['views_per_scene']} views to {out_dir}")


@main.command("train-toy")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", default=5000, show_default=True)
@click.option("--lr", default=5e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Continue from an existing checkpoint.")
def cmd_train_toy(dataset, out_path, steps, lr, seed, resume):
    """Fit the toy generator to a dataset (auto-decoder training)."""
    try:
        _, scenes = load_dataset(dataset)
    except DatasetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    cfg = TrainConfig(steps=steps, lr=lr, latent_lr=lr, seed=seed)
    gen = init_latents = None
    if resume:
        gen, init_latents, _ = load_checkpoint(resume)
    try:
        result = train_toy_generator(scenes, cfg, generator=gen,
                                     init_latents=init_latents,
                                     progress=lambda s, l: click.echo(
                                         f"step {s}: loss {l:.5f}"))
    except TrainingDivergence as e:
        click.echo(f"error: training diverged: {e}", err=True)
        sys.exit(1)
    save_checkpoint(out_path, result.generator, latents=result.latents)
    curve = Path(out_path).with_suffix(".loss.csv")
    curve.write_text("step,loss\n" + "".join(
        f"{i},{v}\n" for i, v in enumerate(result.loss_history)))
    report.save_loss_curve(Path(out_path).with_suffix(".loss.png"),
                           result.loss_history, title="toy training loss")
    click.echo(f"checkpoint: {out_path}  final loss "
               f"{result.loss_history[-1]:.5f}")


@main.command("invert")
@click.option("--image", required=True, type=click.Path())
@click.option("--checkpoint", required=True)
@click.option("--out", "run_dir", required=True, type=click.Path())
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None, help="JSON RunConfig; CLI flags override it.")
@click.option("--yaw", default=None, type=float)
@click.option("--pitch", default=None, type=float)
@click.option("--alpha", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--iterations", default=None, type=int)
@click.option("--early-stop-iterations", default=None, type=int)
@click.option("--n-pseudo-views", default=None, type=int)
@click.option("--blend-mode", default=None,
              type=click.Choice(["gaussian", "poisson"]))
@click.option("--theta", default=None, type=float)
@click.option("--density-reg-weight", default=None, type=float)
def cmd_invert(image, checkpoint, run_dir, config_file, **overrides):
    """Invert one input view: stage 1 -> mesh -> pseudo-views -> stage 2."""
    base = json.loads(Path(config_file).read_text()) if config_file else {}
    base["image"] = image
    base["checkpoint"] = str(_resolve_checkpoint(checkpoint))
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    try:
        cfg = RunConfig.from_dict(base)
    except (ValueError, TypeError) as e:
        click.echo(f"error: bad config: {e}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    if not Path(cfg.checkpoint).exists():
        click.echo(f"error: checkpoint not found: {cfg.checkpoint}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    if not Path(cfg.image).exists():
        click.echo(f"error: input image not found: {cfg.image}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    try:
        summary = run_inversion(run_dir, cfg, progress=click.echo)
    except StageError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(STAGE_EXIT_CODES.get(e.stage, 1))
    report.save_loss_curve(Path(run_dir) / "stage2" / "loss.png",
                           _load_history(Path(run_dir) / "stage2" / "loss.csv"),
                           title="pivotal tuning loss")
    click.echo(f"input-view PSNR: {summary['input_psnr']:.2f} dB")
    click.echo(f"run directory: {run_dir}")


def _load_history(csv_path):
    from .pipeline import _read_loss_csv
    return _read_loss_csv(csv_path)


@main.command("render")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--frames", "n_frames", default=60, show_default=True)
@click.option("--yaw-range", default=0.35, show_default=True)
@click.option("--pitch-range", default=0.25, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_render(run_dir, n_frames, yaw_range, pitch_range, out_dir):
    """Render the inverted result along a closed sphere trajectory."""
    try:
        gen, w, cfg, _ = load_run(run_dir)
    except (OSError, KeyError, ValueError) as e:
        click.echo(f"error: invalid run directory: {e}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    _render_trajectory(gen, w, cfg, n_frames, yaw_range, pitch_range, out_dir)
    click.echo(f"{n_frames} frames in {out_dir}")


def _render_trajectory(gen, w, cfg, n_frames, yaw_range, pitch_range, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = sphere_trajectory(n_frames, yaw_range, pitch_range,
                             radius=cfg.radius, fov_y=cfg.fov_y)
    render = cfg.render()
    manifest = []
    with torch.no_grad():
        for i, pose in enumerate(traj.poses):
            img = gen.synthesize(w, pose, render).image_np()
            pngio.save_image_u8(out / f"frame_{i:04d}.png", img)
            manifest.append({"frame": i, **pose.to_dict()})
    (out / "trajectory.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))


@main.command("fit-direction")
@click.option("--checkpoint", required=True)
@click.option("--attribute", "scorer_name", required=True,
              type=click.Choice(sorted(SCORERS)))
@click.option("--n-samples", default=400, show_default=True)
@click.option("--k-extreme", default=60, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_fit_direction(checkpoint, scorer_name, n_samples, k_extreme, seed,
                      out_path):
    """Discover a latent attribute direction from score-ranked samples."""
    ckpt = _resolve_checkpoint(checkpoint)
    if not ckpt.exists():
        click.echo(f"error: checkpoint not found: {ckpt}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    gen, _, _ = load_checkpoint(ckpt)
    lats, labels, _ = build_attribute_set(gen, SCORERS[scorer_name],
                                          n_samples, k_extreme, seed=seed)
    direction = fit_direction(lats, labels, attribute_name=scorer_name,
                              seed=seed)
    direction.save(out_path)
    click.echo(f"direction '{scorer_name}' held-out accuracy "
               f"{direction.test_accuracy:.3f} -> {out_path}")


@main.command("edit")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--direction", "direction_file", type=click.Path(exists=True),
              default=None)
@click.option("--strength", default=1.0, show_default=True)
@click.option("--texture", "texture_image", type=click.Path(exists=True),
              default=None, help="Edited input image: re-run the full "
              "inversion pipeline on it instead of a latent edit.")
@click.option("--frames", "n_frames", default=16, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_edit(run_dir, direction_file, strength, texture_image, n_frames,
             out_dir):
    """Latent edit (direction + strength) or texture edit (re-inversion)."""
    if (direction_file is None) == (texture_image is None):
        click.echo("error: pass exactly one of --direction / --texture",
                   err=True)
        sys.exit(EXIT_DATA_ERROR)
    try:
        gen, w, cfg, _ = load_run(run_dir)
    except (OSError, KeyError, ValueError) as e:
        click.echo(f"error: invalid run directory: {e}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    if texture_image:
        import dataclasses
        cfg2 = dataclasses.replace(cfg, image=texture_image)
        try:
            summary = run_inversion(out_dir, cfg2)
        except StageError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(STAGE_EXIT_CODES.get(e.stage, 1))
        click.echo(f"texture-edit run: input PSNR "
                   f"{summary['input_psnr']:.2f} dB -> {out_dir}")
        return
    direction = AttributeDirection.load(direction_file)
    try:
        w_edit = apply_edit(w, direction, strength)
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    _render_trajectory(gen, w_edit, cfg, n_frames, 0.35, 0.25, out_dir)
    click.echo(f"edited trajectory ({direction.attribute_name}, "
               f"strength {strength:+g}) in {out_dir}")


@main.command("eval")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Procedural dataset root (exact ground truth).")
@click.option("--baseline", "baseline_dirs", multiple=True,
              type=click.Path(exists=True),
              help="Baseline run dirs paired by scene id.")
@click.option("--novel-views", default=6, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_eval(run_dirs, dataset, baseline_dirs, novel_views, out_dir):
    """Score runs against exact procedural ground truth; write CSV + JSON +
    figures, with paired deltas when baselines are given."""
    if not run_dirs:
        click.echo("error: no run directories given", err=True)
        sys.exit(EXIT_DATA_ERROR)
    try:
        _, scenes = load_dataset(dataset)
    except DatasetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    by_id = {s["id"]: s for s in scenes}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def score(run_dir):
        gen, w, cfg, summary = load_run(run_dir)
        sid = Path(cfg.image).parent.name
        if sid not in by_id:
            raise DatasetError(f"run {run_dir} references scene {sid!r} "
                               "missing from the dataset")
        from .pipeline import evaluate_run_vs_scene
        scene = by_id[sid]["scene"]
        traj = sphere_trajectory(novel_views, radius=cfg.radius,
                                 fov_y=cfg.fov_y)
        rec = evaluate_run_vs_scene(gen, w, scene, cfg.render(), traj.poses)
        rec["input_psnr"] = summary["input_psnr"]
        return sid, rec

    try:
        main_scores = dict(score(r) for r in run_dirs)
        base_scores = dict(score(r) for r in baseline_dirs)
    except DatasetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    if baseline_dirs and set(base_scores) != set(main_scores):
        click.echo("error: baseline scene ids do not match run scene ids",
                   err=True)
        sys.exit(EXIT_DATA_ERROR)

    rep = MetricReport(scene_ids=sorted(main_scores), per_scene=main_scores)
    rep.write_csv(out / "metrics.csv")
    rep.write_json(out / "metrics.json")
    report.save_metric_bars(out / "metrics.png", rep)
    click.echo(f"aggregate: " + ", ".join(
        f"{k}={v:.3f}" for k, v in rep.aggregate.items()))
    if base_scores:
        paired = [{"scene_id": sid,
                   **{f"{k}_pipeline": v for k, v in main_scores[sid].items()},
                   **{f"{k}_baseline": v for k, v in base_scores[sid].items()}}
                  for sid in sorted(main_scores)]
        deltas = {k: float(np.mean([p[f"{k}_pipeline"] - p[f"{k}_baseline"]
                                    for p in paired]))
                  for k in main_scores[next(iter(main_scores))]}
        (out / "paired.json").write_text(json.dumps(
            {"per_scene": paired, "mean_deltas": deltas}, indent=1,
            sort_keys=True))
        for metric in ("novel_psnr", "input_psnr", "consistency"):
            report.save_paired_deltas(out / f"delta_{metric}.png", paired,
                                      metric=metric)
        click.echo("mean deltas vs baseline: " + ", ".join(
            f"{k}={v:+.3f}" for k, v in deltas.items()))


if __name__ == "__main__":
    main()
