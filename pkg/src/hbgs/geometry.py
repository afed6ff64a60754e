"""Pinhole cameras, rigid transforms and quaternion algebra.

Conventions: quaternions are stored (w, x, y, z); a CameraPose is the
camera-to-world transform [R | C]; cameras look down +z with the image
origin at the top-left and v growing downward. Pixel (i, j) has its centre
at coordinates (u, v) = (i, j).

Everything is written against float64 torch tensors so the same code paths
serve both plain evaluation and autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BehindCameraError, GeometryError

DTYPE = torch.float64
NEAR = 1e-8


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point outside image")

    def scaled(self, factor: float, width: int, height: int) -> "Intrinsics":
        """Intrinsics of the same camera resampled to ``width`` x ``height``.

        Pixel centres sit on integer coordinates, so the principal point
        shifts by half a pixel on each side of the rescale.
        """
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=width,
            height=height,
        )

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


def normalize_quat(q) -> torch.Tensor:
    q = as_tensor(q)
    n = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if bool((n < 1e-12).any()):
        raise GeometryError("zero quaternion")
    return q / n


def quat_to_rotmat(q) -> torch.Tensor:
    """Rotation matrix of a (possibly unnormalized) quaternion, batched over leading dims."""
    w, x, y, z = normalize_quat(q).unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*w.shape, 3, 3)


def rotmat_to_quat(R) -> torch.Tensor:
    """Unit quaternion with w >= 0 for a rotation matrix (Shepperd's method)."""
    R = np.asarray(as_tensor(R).detach(), dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return torch.as_tensor(q)


def quat_multiply(a, b) -> torch.Tensor:
    aw, ax, ay, az = as_tensor(a).unbind(-1)
    bw, bx, by, bz = as_tensor(b).unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conjugate(q) -> torch.Tensor:
    q = as_tensor(q)
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=DTYPE)


def axis_angle_to_quat(axis, angle: float) -> torch.Tensor:
    axis = as_tensor(axis)
    axis = axis / torch.linalg.vector_norm(axis)
    half = 0.5 * angle
    return torch.cat([torch.tensor([math.cos(half)], dtype=DTYPE), math.sin(half) * axis])


def rotation_angle_deg(Ra, Rb) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    Ra = np.asarray(as_tensor(Ra).detach())
    Rb = np.asarray(as_tensor(Rb).detach())
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass
class CameraPose:
    """Camera-to-world pose: ``p_world = R(rotation) @ p_cam + translation``.

    ``rotation`` need not be unit length; it is normalized on every use.
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        self.rotation = as_tensor(self.rotation)
        self.translation = as_tensor(self.translation)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_vector(cls, vec) -> "CameraPose":
        """Pose from the flat 7-vector (tx, ty, tz, qw, qx, qy, qz)."""
        vec = as_tensor(vec)
        return cls(vec[3:7], vec[0:3])

    def as_vector(self) -> torch.Tensor:
        return torch.cat([self.translation, self.rotation])

    def rotmat(self) -> torch.Tensor:
        return quat_to_rotmat(self.rotation)

    def normalized(self) -> "CameraPose":
        q = normalize_quat(self.rotation)
        if float(q[0]) < 0:
            q = -q
        return CameraPose(q, self.translation)

    def detached(self) -> "CameraPose":
        return CameraPose(self.rotation.detach().clone(), self.translation.detach().clone())

    def center(self) -> torch.Tensor:
        return self.translation

    def to_dict(self) -> dict:
        return dict(rotation=[float(x) for x in self.rotation], translation=[float(x) for x in self.translation])

    @classmethod
    def from_dict(cls, d) -> "CameraPose":
        return cls(d["rotation"], d["translation"])


def cam_to_world(pose: CameraPose, p_cam) -> torch.Tensor:
    p_cam = as_tensor(p_cam)
    return p_cam @ pose.rotmat().T + pose.translation


def world_to_cam(pose: CameraPose, p_world) -> torch.Tensor:
    p_world = as_tensor(p_world)
    return (p_world - pose.translation) @ pose.rotmat()


def project_points(intr: Intrinsics, pose: CameraPose, points):
    """Batched pinhole projection.

    Returns ``(uv, depth, valid)`` where ``valid`` marks points in front of
    the near threshold. Rows with ``valid == False`` carry unusable uv.
    """
    p = world_to_cam(pose, points)
    z = p[..., 2]
    valid = z > NEAR
    zs = torch.where(valid, z, torch.ones_like(z))
    u = intr.fx * p[..., 0] / zs + intr.cx
    v = intr.fy * p[..., 1] / zs + intr.cy
    return torch.stack([u, v], dim=-1), z, valid


def project(intr: Intrinsics, pose: CameraPose, p_world):
    """Project a single world point to ``(u, v, depth)``.

    Raises BehindCameraError when the point is not in front of the camera.
    """
    uv, z, valid = project_points(intr, pose, as_tensor(p_world).reshape(1, 3))
    if not bool(valid[0]):
        raise BehindCameraError(z[0])
    return uv[0, 0], uv[0, 1], z[0]


def pixel_rays(intr: Intrinsics, u, v) -> torch.Tensor:
    """Camera-frame points at unit depth for pixel coordinates (u, v)."""
    u = as_tensor(u)
    v = as_tensor(v)
    return torch.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, torch.ones_like(u)], dim=-1)


def backproject_unit_depth(intr: Intrinsics, pose: CameraPose, u, v) -> torch.Tensor:
    return cam_to_world(pose, pixel_rays(intr, u, v))
