"""Single-image inversion runs: stage orchestration, run-directory layout,
resumable stages, and the paired toy benchmark."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pngio
from .camera import CameraPose
from .generator import (LatentCode, RenderConfig, TriplaneGenerator,
                        load_checkpoint, save_checkpoint)
from .geometry import (erode_and_feather, extract_mesh, project_colors,
                       render_warp, save_mesh_obj)
from .inversion import (InversionResult, OptimizerConfig, invert_initial,
                        invert_pivotal, sample_aux_poses)
from .pseudoview import (adaptive_theta, compose_pseudo_view, difference_map,
                         fit_occluded_latent, render_occluded,
                         save_pseudo_view)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for exit-code mapping."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


STAGE_ORDER = ("stage1", "mesh", "pseudo", "stage2")


@dataclass
class RunConfig:
    """Fully resolved configuration of one inversion run.

    Unknown keys are rejected on load; missing keys take these defaults. The
    resolved document is echoed into the run directory as config.json.
    """
    checkpoint: str = ""
    image: str = ""
    # input camera
    yaw: float = 0.0
    pitch: float = 0.0
    radius: float = 2.6
    fov_y: float = 0.6
    # rendering
    image_size: int = 64
    samples_per_ray: int = 24
    # optimization (stage 1 and 2)
    early_stop_lr: float = 5e-3
    early_stop_iterations: int = 150
    learning_rate: float = 3e-4
    iterations: int = 240
    l2_weight: float = 1.0
    perceptual_weight: float = 1.0
    alpha: float = 1.0
    occluded_weight: float = 1.0
    visible_weight: float = 1.0
    seed: int = 0
    # pseudo-view synthesis
    n_pseudo_views: int = 8
    pose_strategy: str = "grid"
    theta: float = 0.15
    adaptive_theta: bool = False
    blend_mode: str = "gaussian"
    # occluded content: "difference_fit" refits a fresh latent on
    # difference-map pixels; "early_stop" renders the stage-1 code directly
    occluded_source: str = "difference_fit"
    erosion_radius: int = 1
    blur_radius: int = 10
    # geometry
    mesh_grid_res: int = 64
    mesh_level: float = 10.0
    # ablation: anchor density instead of supervising pseudo-views
    density_reg_weight: float = 0.0

    def __post_init__(self):
        if self.occluded_source not in ("difference_fit", "early_stop"):
            raise ValueError(
                f"unknown occluded_source {self.occluded_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def pose(self) -> CameraPose:
        return CameraPose(yaw=self.yaw, pitch=self.pitch, radius=self.radius,
                          fov_y=self.fov_y)

    def render(self) -> RenderConfig:
        return RenderConfig(image_size=self.image_size,
                            samples_per_ray=self.samples_per_ray)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate, iterations=self.iterations,
            l2_weight=self.l2_weight, perceptual_weight=self.perceptual_weight,
            alpha=self.alpha, occluded_weight=self.occluded_weight,
            visible_weight=self.visible_weight, seed=self.seed,
            early_stop_iterations=self.early_stop_iterations,
            early_stop_lr=self.early_stop_lr,
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _stage_hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        elif isinstance(p, bytes):
            h.update(p)
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def _stage_done(stage_dir: Path, expect_hash: str) -> bool:
    marker = stage_dir / "stage.json"
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text()).get("hash") == expect_hash
    except (json.JSONDecodeError, OSError):
        return False


def _mark_stage(stage_dir: Path, h: str, **extra) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "stage.json").write_text(
        json.dumps({"hash": h, **extra}, indent=1, sort_keys=True))


def _write_loss_csv(path, history) -> None:
    keys = sorted({k for rec in history for k in rec})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


def _read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items() if v != ""}
                for row in csv.DictReader(f)]


def run_inversion(run_dir, cfg: RunConfig, gen: TriplaneGenerator | None = None,
                  image: np.ndarray | None = None,
                  progress=None) -> dict:
    """Execute the full pipeline into `run_dir` and return the summary dict.

    Stages (stage1 -> mesh -> pseudo -> stage2) are resumable: a completed
    stage whose content hash still matches its inputs is not recomputed. Any
    failure writes error_<stage>.json and raises StageError, leaving earlier
    stage outputs intact. alpha=0 skips mesh and pseudo entirely.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if gen is None:
        gen, _, _ = load_checkpoint(cfg.checkpoint)
    if image is None:
        image = pngio.load_image(cfg.image)
    image = np.asarray(image, dtype=np.float64)
    pose = cfg.pose()
    render = cfg.render()
    opt = cfg.optimizer()

    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    cfg_fp = cfg.fingerprint()

    def log(msg):
        if progress:
            progress(msg)

    def run_stage(name, expect_hash, fn):
        sdir = run_dir / name
        err_file = run_dir / f"error_{name}.json"
        if _stage_done(sdir, expect_hash):
            log(f"{name}: cached")
            return
        try:
            extra = fn(sdir) or {}
        except Exception as e:  # noqa: BLE001 - stage boundary
            err_file.write_text(json.dumps({"stage": name, "error": str(e)}))
            raise StageError(name, str(e)) from e
        if err_file.exists():
            err_file.unlink()
        _mark_stage(sdir, expect_hash, **extra)
        log(f"{name}: done")

    # ---- stage 1: early-stopped latent inversion ----------------------------
    s1_hash = _stage_hash(image, cfg.to_dict(), "stage1")

    def stage1(sdir: Path):
        sdir.mkdir(parents=True, exist_ok=True)
        z_e, history = invert_initial(gen, image, pose, opt, render)
        np.save(sdir / "z_e.npy", z_e.numpy())
        _write_loss_csv(sdir / "loss.csv", history)
        with torch.no_grad():
            recon = gen.synthesize(z_e, pose, render).image_np()
        pngio.save_image_u8(sdir / "recon.png", recon)
        np.save(sdir / "recon.npy", recon)

    run_stage("stage1", s1_hash, stage1)
    z_e = LatentCode(torch.tensor(np.load(run_dir / "stage1" / "z_e.npy"),
                                  dtype=gen.dtype), "Wplus")
    stage1_recon = np.load(run_dir / "stage1" / "recon.npy")

    aux_poses = []
    if cfg.alpha > 0 and cfg.n_pseudo_views > 0:
        aux_poses = sample_aux_poses(cfg.n_pseudo_views,
                                     strategy=cfg.pose_strategy, seed=cfg.seed,
                                     radius=cfg.radius, fov_y=cfg.fov_y)

        # ---- mesh: coarse geometry from z_e -------------------------------
        m_hash = _stage_hash(s1_hash, cfg.mesh_grid_res, cfg.mesh_level)

        def stage_mesh(sdir: Path):
            sdir.mkdir(parents=True, exist_ok=True)
            mesh = extract_mesh(gen, z_e, grid_res=cfg.mesh_grid_res,
                                level=cfg.mesh_level)
            if mesh.is_empty:
                raise ValueError("extracted mesh is empty; density never "
                                 f"crosses level {cfg.mesh_level}")
            mesh = project_colors(mesh, image, pose)
            save_mesh_obj(sdir / "mesh.obj", mesh)

        run_stage("mesh", m_hash, stage_mesh)

        # ---- pseudo: one bundle per auxiliary pose --------------------------
        p_hash = _stage_hash(m_hash, cfg.theta, cfg.adaptive_theta,
                             cfg.blend_mode, cfg.erosion_radius,
                             cfg.blur_radius, cfg.n_pseudo_views,
                             cfg.pose_strategy, cfg.occluded_source)

        def stage_pseudo(sdir: Path):
            from .geometry import load_mesh_obj
            sdir.mkdir(parents=True, exist_ok=True)
            mesh = load_mesh_obj(run_dir / "mesh" / "mesh.obj")
            theta = (adaptive_theta(image, stage1_recon)
                     if cfg.adaptive_theta else cfg.theta)
            d_map = difference_map(image, stage1_recon, theta)
            if cfg.occluded_source == "difference_fit":
                occ = fit_occluded_latent(gen, image, d_map, pose, opt, render)
                z_occ, occ_loss = occ.z_o, occ.final_loss
            else:  # early_stop: the stage-1 code itself supplies occluded content
                z_occ, occ_loss = z_e, float("nan")
            np.save(sdir / "z_o.npy", z_occ.numpy())
            pngio.save_gray_u16(sdir / "difference_map.png", d_map.values)
            for i, p_i in enumerate(aux_poses):
                v_i, raw = render_warp(mesh, p_i, cfg.image_size)
                soft = erode_and_feather(raw, cfg.erosion_radius,
                                         cfg.blur_radius)
                o_i = render_occluded(gen, z_occ, p_i, render)
                pv = compose_pseudo_view(v_i, o_i, soft, p_i,
                                         mode=cfg.blend_mode, visible_raw=raw)
                save_pseudo_view(sdir / f"view_{i:03d}", pv, provenance={
                    "theta": theta, "blend_mode": cfg.blend_mode,
                    "occluded_source": cfg.occluded_source,
                    "occluded_final_loss": occ_loss,
                })
            return {"theta": theta, "n_views": len(aux_poses)}

        run_stage("pseudo", p_hash, stage_pseudo)
    else:
        p_hash = _stage_hash(s1_hash, "no-pseudo")

    # ---- stage 2: pivotal tuning ---------------------------------------------
    s2_hash = _stage_hash(p_hash, opt.__dict__, cfg.density_reg_weight)

    def stage2(sdir: Path):
        from .pseudoview import load_pseudo_view
        sdir.mkdir(parents=True, exist_ok=True)
        views = []
        if aux_poses:
            pdir = run_dir / "pseudo"
            views = [load_pseudo_view(pdir / f"view_{i:03d}")
                     for i in range(len(aux_poses))]
        density_reg = None
        opt2 = copy.copy(opt)
        if cfg.density_reg_weight > 0:
            opt2.alpha = 0.0
            density_reg = _density_anchor(gen, z_e, cfg.density_reg_weight)
            views = []
        res = invert_pivotal(gen, image, pose, views, opt2, render, z_e,
                             density_reg=density_reg)
        save_checkpoint(sdir / "tuned.npz", res.tuned_generator,
                        latents={"w_star": res.w_star.numpy()})
        _write_loss_csv(sdir / "loss.csv", res.loss_history)
        with torch.no_grad():
            recon = res.tuned_generator.synthesize(res.w_star, pose,
                                                   render).image_np()
        pngio.save_image_u8(sdir / "recon.png", recon)
        np.save(sdir / "recon.npy", recon)

    run_stage("stage2", s2_hash, stage2)

    recon = np.load(run_dir / "stage2" / "recon.npy")
    from .evaluation import psnr
    summary = {
        "config_fingerprint": cfg_fp,
        "input_psnr": psnr(image, recon),
        "stage_hashes": {"stage1": s1_hash, "pseudo": p_hash, "stage2": s2_hash},
        "n_pseudo_views": len(aux_poses),
        "alpha": cfg.alpha,
        "seed": cfg.seed,
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _density_anchor(gen, z_e, weight, grid_res: int = 16):
    """Ablation regularizer spec: pin the tuned density field to the stage-1
    field on a coarse grid. Returns the (points, reference, weight) triple
    consumed by the optimization loop."""
    axis = torch.linspace(-1.0, 1.0, grid_res, dtype=gen.dtype)
    pts = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"),
                      dim=-1).reshape(-1, 3)
    with torch.no_grad():
        ref = gen.query_density(z_e, pts).detach()
    return (pts, ref, weight)


def load_run(run_dir):
    """Returns (tuned generator, w_star, RunConfig, summary dict)."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_json(run_dir / "config.json")
    gen, latents, _ = load_checkpoint(run_dir / "stage2" / "tuned.npz")
    w = LatentCode(torch.tensor(latents["w_star"], dtype=gen.dtype), "Wplus")
    summary = json.loads((run_dir / "summary.json").read_text())
    return gen, w, cfg, summary


# -- paired toy benchmark -------------------------------------------------------


@dataclass
class BenchmarkResult:
    per_scene: list[dict]           # one record per scene
    aggregate: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate and self.per_scene:
            keys = [k for k, v in self.per_scene[0].items()
                    if isinstance(v, (int, float))]
            self.aggregate = {k: float(np.mean([r[k] for r in self.per_scene]))
                              for k in keys}
            self.aggregate["consistency_win_rate"] = float(np.mean(
                [r["consistency_pipeline"] > r["consistency_baseline"]
                 for r in self.per_scene]))


def benchmark_scene(gen, scene, cfg: RunConfig, novel_poses,
                    view_index: int = 0,
                    baseline_iterations: int | None = None) -> dict:
    """Paired comparison on one held-out scene: full pipeline vs the alpha=0
    single-view overfit baseline, sharing the stage-1 code and input view.

    `baseline_iterations` lets the baseline run to a different budget (e.g.
    matched input-view fidelity); default is the pipeline's count. Returns a
    flat record with *_pipeline / *_baseline metric keys.
    """
    from .evaluation import psnr
    from .geometry import (erode_and_feather, extract_mesh, project_colors,
                           render_warp)
    from .inversion import invert_initial, invert_pivotal, sample_aux_poses
    from .pseudoview import (adaptive_theta, compose_pseudo_view,
                             difference_map, fit_occluded_latent,
                             render_occluded)
    image = np.asarray(scene["images"][view_index], dtype=np.float64)
    pose = scene["poses"][view_index]
    render = cfg.render()
    opt = cfg.optimizer()

    z_e, _ = invert_initial(gen, image, pose, opt, render)
    with torch.no_grad():
        recon1 = gen.synthesize(z_e, pose, render).image_np()
    mesh = project_colors(extract_mesh(gen, z_e, grid_res=cfg.mesh_grid_res,
                                       level=cfg.mesh_level), image, pose)
    theta = (adaptive_theta(image, recon1) if cfg.adaptive_theta
             else cfg.theta)
    d_map = difference_map(image, recon1, theta)
    if cfg.occluded_source == "difference_fit":
        z_occ = fit_occluded_latent(gen, image, d_map, pose, opt, render).z_o
    else:
        z_occ = z_e
    views = []
    for p_i in sample_aux_poses(cfg.n_pseudo_views, strategy=cfg.pose_strategy,
                                seed=cfg.seed, radius=cfg.radius,
                                fov_y=cfg.fov_y):
        v_i, raw = render_warp(mesh, p_i, cfg.image_size)
        soft = erode_and_feather(raw, cfg.erosion_radius, cfg.blur_radius)
        o_i = render_occluded(gen, z_occ, p_i, render)
        views.append(compose_pseudo_view(v_i, o_i, soft, p_i,
                                         mode=cfg.blend_mode,
                                         visible_raw=raw))

    pipe = invert_pivotal(gen, image, pose, views, opt, render, z_e)
    opt_b = copy.copy(opt)
    opt_b.alpha = 0.0
    if baseline_iterations is not None:
        opt_b.iterations = baseline_iterations
    base = invert_pivotal(gen, image, pose, [], opt_b, render, z_e)

    record = {"scene_id": scene["id"]}
    for tag, res in (("pipeline", pipe), ("baseline", base)):
        with torch.no_grad():
            rec = res.tuned_generator.synthesize(res.w_star, pose,
                                                 render).image_np()
        m = evaluate_run_vs_scene(res.tuned_generator, res.w_star,
                                  scene["scene"], render, novel_poses)
        record[f"input_psnr_{tag}"] = psnr(image, rec)
        for k, v in m.items():
            record[f"{k}_{tag}"] = v
    return record


def evaluate_run_vs_scene(gen, w, scene, render, novel_poses):
    """Novel-view PSNR / perceptual distance / reprojection consistency of
    one inverted model against exact re-renders of its source scene."""
    from .evaluation import (perceptual_distance, psnr,
                             reprojection_consistency_images)
    from .scenes import render_scene
    images, depths, gt_psnr, gt_perc = [], [], [], []
    with torch.no_grad():
        for p in novel_poses:
            out = gen.synthesize(w, p, render)
            img = out.image_np()
            gt, _ = render_scene(scene, p, render.image_size)
            gt_psnr.append(psnr(img, gt))
            gt_perc.append(perceptual_distance(img, gt))
            images.append(img)
            depths.append(out.depth_np())
    cons = reprojection_consistency_images(images, depths, novel_poses,
                                           render.image_size, far=render.far)
    return {"novel_psnr": float(np.mean(gt_psnr)),
            "novel_perceptual": float(np.mean(gt_perc)),
            "consistency": cons}
