"""Voxel anchors built from a sparse point cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import GeometryError

DEFAULT_FEATURE_DIM = 32
FEATURE_INIT_STD = 0.01


@dataclass
class AnchorSet:
    positions: torch.Tensor  # (N, 3), lattice aligned
    features: torch.Tensor  # (N, F), learnable
    voxel_scale: float

    def __len__(self):
        return self.positions.shape[0]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def voxel_indices(points, eps: float) -> np.ndarray:
    """Unique integer lattice indices of ``points``, sorted lexicographically."""
    if not eps > 0:
        raise GeometryError("invalid voxel scale")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("empty point cloud")
    idx = round_half_away(pts / eps).astype(np.int64)
    # np.unique on rows sorts lexicographically by (x, y, z)
    return np.unique(idx, axis=0)


def voxelize(points, eps: float) -> np.ndarray:
    """Snap points to the nearest lattice node of spacing ``eps`` and dedupe."""
    return voxel_indices(points, eps).astype(np.float64) * eps


def init_anchor_features(positions, feature_dim: int = DEFAULT_FEATURE_DIM, seed: int = 0,
                         voxel_scale: float = 1.0) -> AnchorSet:
    if feature_dim < 1:
        raise GeometryError("feature dimension must be >= 1")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, FEATURE_INIT_STD, size=(len(pos), feature_dim))
    return AnchorSet(torch.as_tensor(pos), torch.as_tensor(feats), float(voxel_scale))


def build_anchors(points, eps: float, feature_dim: int = DEFAULT_FEATURE_DIM, seed: int = 0) -> AnchorSet:
    return init_anchor_features(voxelize(points, eps), feature_dim, seed, voxel_scale=eps)
