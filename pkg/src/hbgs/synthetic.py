"""Seeded synthetic scenes with known camera poses.

Ground-truth images come from a deliberately simple renderer: each point is
an isotropic Gaussian blob of fixed world-space radius, composited front to
back in numpy. It shares no code with the learned splatting renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CameraPose, Intrinsics, axis_angle_to_quat, quat_multiply, rotmat_to_quat
from .scene_io import SceneBundle, split_every

BLOB_OPACITY = 0.95
FOV_DEG = 50.0
ARC_DEG = 60.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 7
    n_points: int = 500
    n_cameras: int = 12
    scene_extent: float = 2.0
    pose_noise_rot_deg: float = 5.0
    pose_noise_trans: float = 0.02
    width: int = 64
    height: int = 64
    test_every: int = 8

    def __post_init__(self):
        if self.n_points < 1 or self.n_cameras < 1 or self.width < 1 or self.height < 1:
            raise ValueError("counts must be >= 1")
        if self.pose_noise_rot_deg < 0 or self.pose_noise_trans < 0:
            raise ValueError("noise magnitudes must be >= 0")

    @property
    def blob_sigma(self) -> float:
        return self.scene_extent / 25.0


def look_at(position, target) -> CameraPose:
    """Camera at ``position`` looking at ``target`` with image-down along world +y."""
    z = np.asarray(target, float) - np.asarray(position, float)
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return CameraPose(rotmat_to_quat(R), np.asarray(position, float))


def arc_poses(n: int, extent: float):
    radius = 2.0 * extent
    if n == 1:
        yaws = [0.0]
    else:
        yaws = np.linspace(-ARC_DEG / 2, ARC_DEG / 2, n)
    poses = []
    for i, yaw in enumerate(yaws):
        a = math.radians(yaw)
        elev = math.radians(8.0 if i % 2 else -8.0)
        pos = radius * np.array([math.sin(a) * math.cos(elev), math.sin(elev), -math.cos(a) * math.cos(elev)])
        poses.append(look_at(pos, np.zeros(3)))
    return poses


def default_intrinsics(width: int, height: int) -> Intrinsics:
    f = 0.5 * width / math.tan(math.radians(FOV_DEG) / 2)
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def render_blobs(points, colors, sigma, intr: Intrinsics, pose: CameraPose, opacity=BLOB_OPACITY) -> np.ndarray:
    """Reference point-blob renderer (numpy, independent of the learned renderer)."""
    R = np.asarray(pose.normalized().rotmat())
    C = np.asarray(pose.translation)
    cam = (np.asarray(points) - C) @ R
    H, W = intr.height, intr.width
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    order = np.argsort(cam[:, 2], kind="stable")
    for i in order:
        x, y, z = cam[i]
        if z <= 1e-8:
            continue
        u = intr.fx * x / z + intr.cx
        v = intr.fy * y / z + intr.cy
        s = intr.fx * sigma / z
        r = 3.0 * s
        u0, u1 = max(0, math.ceil(u - r)), min(W - 1, math.floor(u + r))
        v0, v1 = max(0, math.ceil(v - r)), min(H - 1, math.floor(v + r))
        if u0 > u1 or v0 > v1:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        w = opacity * np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2 * s * s))
        t = trans[v0:v1 + 1, u0:u1 + 1]
        image[v0:v1 + 1, u0:u1 + 1] += (w * t)[..., None] * colors[i]
        trans[v0:v1 + 1, u0:u1 + 1] = t * (1 - w)
    return image


def perturb_pose(pose: CameraPose, rot_deg: float, trans: float, rng: np.random.Generator) -> CameraPose:
    """Rotate by exactly ``rot_deg`` about a random axis and shift by exactly ``trans``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    if rot_deg == 0 and trans == 0:
        return CameraPose(pose.rotation.clone(), pose.translation.clone())
    dq = axis_angle_to_quat(axis, math.radians(rot_deg))
    q = quat_multiply(pose.rotation, dq)
    return CameraPose(q, pose.translation + trans * torch.from_numpy(direction)).normalized()


def generate_synthetic_scene(spec: SyntheticSceneSpec):
    """Ground-truth bundle and a copy whose poses carry the requested noise."""
    rng = np.random.default_rng(spec.seed)
    e = spec.scene_extent
    points = rng.uniform(-e / 2, e / 2, size=(spec.n_points, 3))
    colors = rng.uniform(0.1, 1.0, size=(spec.n_points, 3))
    intr = default_intrinsics(spec.width, spec.height)
    poses = arc_poses(spec.n_cameras, e)
    images = [render_blobs(points, colors, spec.blob_sigma, intr, p) for p in poses]
    names = [f"view_{i:03d}.png" for i in range(spec.n_cameras)]
    test = split_every(spec.n_cameras, spec.test_every)
    gt = SceneBundle([intr] * spec.n_cameras, poses, names, images, points, test, colors)
    noise_rng = np.random.default_rng([spec.seed, 1])
    noisy = [perturb_pose(p, spec.pose_noise_rot_deg, spec.pose_noise_trans * e, noise_rng) for p in poses]
    return gt, gt.with_poses(noisy)
