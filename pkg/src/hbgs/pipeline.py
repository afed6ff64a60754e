"""End-to-end steps behind the command line: scene directories in, JSON/PNG out.

A synthetic scene directory holds two full bundles, ``gt/`` and ``noisy/``,
that share images and differ only in their poses, plus ``manifest.json``
with the generator settings and both pose sets. Any other directory with
``sparse/`` and ``images/`` is treated as a single bundle with no ground
truth.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np
import torch

from .config import RunConfig
from .geometry import CameraPose, rotation_angle_deg
from .metrics import MetricReport, json_float, psnr
from .optimizer import Schedule, joint_optimize, register_test_pose
from .renderer import render
from .scene_io import SceneBundle, load_scene, write_png, write_scene
from .state import TrainState
from .synthetic import SyntheticSceneSpec, generate_synthetic_scene

MANIFEST = "manifest.json"


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def pose_error(pose: CameraPose, ref: CameraPose):
    """(rotation degrees, camera-centre distance)."""
    return (rotation_angle_deg(pose.rotmat(), ref.rotmat()),
            float(torch.linalg.vector_norm(pose.translation - ref.translation)))


# scenes ----------------------------------------------------------------------

def synthesize(spec: SyntheticSceneSpec, scene_dir):
    gt, noisy = generate_synthetic_scene(spec)
    write_scene(gt, os.path.join(scene_dir, "gt"))
    write_scene(noisy, os.path.join(scene_dir, "noisy"))
    views = []
    for name, t, pg, pn in zip(gt.names, gt.test, gt.poses, noisy.poses):
        rot, tr = pose_error(pn, pg)
        views.append(dict(name=name, test=bool(t), gt_pose=pg.as_vector().tolist(),
                          noisy_pose=pn.as_vector().tolist(), rot_noise_deg=rot, trans_noise=tr))
    write_json(os.path.join(scene_dir, MANIFEST), dict(spec=asdict(spec), extent=spec.scene_extent, views=views))
    return gt, noisy


class Scene:
    """A loaded scene directory: the bundle to use plus optional ground truth."""

    def __init__(self, scene_dir, which="noisy", test_every=8):
        self.dir = scene_dir
        manifest_path = os.path.join(scene_dir, MANIFEST)
        self.manifest = read_json(manifest_path) if os.path.isfile(manifest_path) else None
        if self.manifest is not None:
            self.bundle = load_scene(os.path.join(scene_dir, which), test_every)
            by_name = {v["name"]: v for v in self.manifest["views"]}
            self.gt_poses = [CameraPose.from_vector(by_name[n]["gt_pose"]) for n in self.bundle.names]
            self.extent = float(self.manifest["extent"])
        else:
            self.bundle = load_scene(scene_dir, test_every)
            self.gt_poses = None
            pts = np.asarray(self.bundle.points)
            self.extent = float((pts.max(0) - pts.min(0)).max()) if len(pts) else 1.0

    def poses(self, which: str):
        """Pose list for ``which`` in {"noisy", "gt"}; "noisy" means the bundle's own poses."""
        if which == "gt":
            if self.gt_poses is None:
                raise ValueError("scene has no ground-truth poses")
            return self.gt_poses
        if self.manifest is not None:
            by_name = {v["name"]: v for v in self.manifest["views"]}
            return [CameraPose.from_vector(by_name[n]["noisy_pose"]) for n in self.bundle.names]
        return self.bundle.poses


# training --------------------------------------------------------------------

def build_state(bundle: SceneBundle, poses, cfg: RunConfig, extent: float) -> TrainState:
    tr = bundle.train_indices()
    eps = cfg.voxel_scale if cfg.voxel_scale is not None else extent / 32
    return TrainState.create(bundle.points, [bundle.intrinsics[i] for i in tr], [poses[i] for i in tr],
                             [bundle.images[i] for i in tr], voxel_scale=eps, extent=extent,
                             feature_dim=cfg.feature_dim, k=cfg.k, seed=cfg.seed,
                             use_image_features=cfg.use_image_features, alpha_cull=cfg.alpha_cull,
                             background=cfg.background)


def schedule_of(cfg: RunConfig) -> Schedule:
    return Schedule(steps=cfg.train_steps, levels=cfg.levels, lr_model=cfg.lr_model, lr_pose=cfg.lr_pose,
                    pose_level_decay=cfg.pose_level_decay, lambda_ssim=cfg.lambda_ssim, lambda_vol=cfg.lambda_vol,
                    optimize_poses=cfg.optimize_poses, seed=cfg.seed)


def train(scene: Scene, cfg: RunConfig, on_step=None) -> TrainState:
    b = scene.bundle
    tr = b.train_indices()
    state = build_state(b, scene.poses(cfg.train_poses), cfg, scene.extent)
    gt = [scene.gt_poses[i] for i in tr] if scene.gt_poses is not None else None
    return joint_optimize(state, [b.images[i] for i in tr], schedule_of(cfg), gt_poses=gt, on_step=on_step)


def render_views(state: TrainState, bundle: SceneBundle, indices, poses, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with torch.no_grad():
        for i, pose in zip(indices, poses):
            write_png(os.path.join(out_dir, bundle.names[i]), render(state, bundle.intrinsics[i], pose).image)


# registration ------------------------------------------------------------------

def register_views(state: TrainState, scene: Scene, cfg: RunConfig, indices=None):
    """Register every test view of ``scene`` against the frozen ``state``."""
    b = scene.bundle
    indices = b.test_indices() if indices is None else indices
    init_poses = scene.poses(cfg.reg_init)
    with torch.no_grad():
        g = state.visible_gaussians()
    rows = []
    for i in indices:
        reg = register_test_pose(state, b.images[i], b.intrinsics[i], init_poses[i], iterations=cfg.reg_iterations,
                                 lr=cfg.reg_lr, levels=cfg.reg_levels, lambda_ssim=cfg.lambda_ssim, gaussians=g,
                                 lr_floor=cfg.reg_lr_floor)
        with torch.no_grad():
            before = psnr(render(state, b.intrinsics[i], init_poses[i]).image, b.images[i])
            after = psnr(render(state, b.intrinsics[i], reg.pose).image, b.images[i])
        row = dict(name=b.names[i], pose=reg.pose.as_vector().tolist(), init_pose=init_poses[i].as_vector().tolist(),
                   loss_before=reg.loss_before, loss_after=reg.loss_after, failed=reg.failed,
                   iterations=reg.iterations, psnr_before=json_float(before), psnr_after=json_float(after))
        if scene.gt_poses is not None:
            rb, tb = pose_error(init_poses[i], scene.gt_poses[i])
            ra, ta = pose_error(reg.pose, scene.gt_poses[i])
            row.update(rot_err_before_deg=rb, rot_err_after_deg=ra, trans_err_before=tb, trans_err_after=ta,
                       trans_err_before_pct=100 * tb / scene.extent, trans_err_after_pct=100 * ta / scene.extent)
        rows.append(row)
    return rows


def registration_summary(rows) -> dict:
    out = dict(n_views=len(rows), n_failed=sum(r["failed"] for r in rows))
    for key in ("rot_err_before_deg", "rot_err_after_deg", "trans_err_before_pct", "trans_err_after_pct",
                "psnr_before", "psnr_after", "loss_before", "loss_after"):
        vals = [r[key] for r in rows if key in r and not isinstance(r[key], str)]
        if vals:
            out[f"mean_{key}"] = float(np.mean(vals))
    return out


# evaluation ------------------------------------------------------------------------

def evaluate(state: TrainState, bundle: SceneBundle, indices, poses) -> MetricReport:
    report = MetricReport()
    with torch.no_grad():
        for i, pose in zip(indices, poses):
            report.add(bundle.names[i], render(state, bundle.intrinsics[i], pose).image, bundle.images[i])
    return report


ABLATION_ROWS = (
    ("anchors only", dict(use_image_features=False, optimize_poses=False)),
    ("+ image features", dict(use_image_features=True, optimize_poses=False)),
    ("+ bundle adjusting", dict(use_image_features=True, optimize_poses=True)),
)


def run_ablation(scene: Scene, cfg: RunConfig, on_row=None):
    """Train each ablation row per seed, register the held-out views and score them there."""
    rows = []
    for name, flags in ABLATION_ROWS:
        per_seed = []
        for seed in cfg.ablation_seeds:
            c = RunConfig.from_dict({**cfg.to_dict(), **flags, "seed": seed})
            state = train(scene, c)
            regs = register_views(state, scene, c)
            b = scene.bundle
            idx = b.test_indices()
            report = evaluate(state, b, idx, [CameraPose.from_vector(r["pose"]) for r in regs])
            per_seed.append(dict(seed=seed, psnr=json_float(report.mean_psnr), ssim=report.mean_ssim))
            if on_row is not None:
                on_row(name, per_seed[-1])
        rows.append(dict(name=name, **flags,
                         psnr=float(np.mean([s["psnr"] for s in per_seed])),
                         ssim=float(np.mean([s["ssim"] for s in per_seed])),
                         lpips="n/a", seeds=per_seed))
    return rows
