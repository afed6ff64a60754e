"""Anchor-to-view matching and hybrid feature fusion.

Each anchor is paired with the training camera whose centre is closest,
then with the pixel of that camera whose unit-depth 3D point is closest.
The anchor's learnable feature, the image feature at that pixel and both
distances are fused by a linear layer into the hybrid feature ``h``.

The discrete choices (camera, pixel) are made without gradients; the
distances and the image feature at the chosen pixel stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError, UnmatchedAnchorError
from .geometry import NEAR, CameraPose, Intrinsics, as_tensor, backproject_unit_depth, world_to_cam
from .image_features import FeatureNets, Mlp, pixel_features


def match_camera(anchor, centers):
    """Index of the nearest camera centre and the distance to it.

    Ties go to the lowest index.
    """
    anchor = as_tensor(anchor)
    centers = torch.stack([as_tensor(c) for c in centers]) if isinstance(centers, (list, tuple)) else as_tensor(centers)
    d = torch.linalg.vector_norm(anchor - centers, dim=-1)
    idx = int(torch.argmin(d))
    return idx, d[idx]


def match_cameras(anchors: torch.Tensor, centers: torch.Tensor):
    """Batched ``match_camera``: returns ``(indices, distances)`` over anchors."""
    d = torch.linalg.vector_norm(anchors[:, None, :] - centers[None, :, :], dim=-1)
    idx = torch.argmin(d, dim=1)
    return idx, d.gather(1, idx[:, None])[:, 0]


def nearest_unit_depth_pixels(intr: Intrinsics, p_cam: torch.Tensor):
    """Pixels whose unit-depth points are closest to camera-frame points.

    The unit-depth points of all pixels form a rectangular grid on the
    plane z = 1, so the squared distance separates per axis and the
    minimizer is the clamped nearest grid node to the perpendicular foot
    (x, y, 1).
    """
    u = torch.floor(intr.fx * p_cam[..., 0] + intr.cx + 0.5).clamp(0, intr.width - 1)
    v = torch.floor(intr.fy * p_cam[..., 1] + intr.cy + 0.5).clamp(0, intr.height - 1)
    return u.long(), v.long()


def match_pixel(anchor, intr: Intrinsics, pose: CameraPose):
    """Matched pixel ``(u, v)`` and distance to its unit-depth 3D point.

    Raises UnmatchedAnchorError for an anchor that is not in front of the camera.
    """
    anchor = as_tensor(anchor)
    p_cam = world_to_cam(pose, anchor)
    if not float(p_cam[2]) > NEAR:
        raise UnmatchedAnchorError()
    with torch.no_grad():
        u, v = nearest_unit_depth_pixels(intr, p_cam)
    d = torch.linalg.vector_norm(anchor - backproject_unit_depth(intr, pose, u.double(), v.double()))
    return (int(u), int(v)), d


@dataclass
class AnchorMatch:
    """Match table for the anchors that found a view.

    ``anchor_index``, ``camera_index``, ``u`` and ``v`` are fixed integer
    choices; the distances are recomputed differentiably per step.
    """

    anchor_index: torch.Tensor
    camera_index: torch.Tensor
    u: torch.Tensor
    v: torch.Tensor
    d_ac: torch.Tensor | None = None
    d_ap: torch.Tensor | None = None
    h: torch.Tensor | None = None

    def __len__(self):
        return int(self.anchor_index.shape[0])


def compute_matches(anchor_pos: torch.Tensor, intrinsics, poses) -> AnchorMatch:
    """Choose camera and pixel for every anchor; drops anchors behind their camera."""
    with torch.no_grad():
        centers = torch.stack([p.translation.detach() for p in poses])
        cam_idx, _ = match_cameras(anchor_pos, centers)
        keep_a, keep_c, us, vs = [], [], [], []
        for c, (intr, pose) in enumerate(zip(intrinsics, poses)):
            sel = torch.nonzero(cam_idx == c)[:, 0]
            if len(sel) == 0:
                continue
            p_cam = world_to_cam(pose.detached(), anchor_pos[sel])
            front = p_cam[:, 2] > NEAR
            sel, p_cam = sel[front], p_cam[front]
            u, v = nearest_unit_depth_pixels(intr, p_cam)
            keep_a.append(sel)
            keep_c.append(torch.full_like(sel, c))
            us.append(u)
            vs.append(v)
    if not keep_a:
        empty = torch.zeros(0, dtype=torch.long)
        return AnchorMatch(empty, empty, empty, empty)
    a = torch.cat(keep_a)
    order = torch.argsort(a)
    return AnchorMatch(a[order], torch.cat(keep_c)[order], torch.cat(us)[order], torch.cat(vs)[order])


def match_distances(match: AnchorMatch, anchor_pos: torch.Tensor, intrinsics, poses):
    """Differentiable (d_ac, d_ap) for a fixed match table."""
    n = len(match)
    d_ac = anchor_pos.new_zeros(n)
    d_ap = anchor_pos.new_zeros(n)
    for c in torch.unique(match.camera_index).tolist():
        rows = torch.nonzero(match.camera_index == c)[:, 0]
        pose, intr = poses[c], intrinsics[c]
        a = anchor_pos[match.anchor_index[rows]]
        pix = backproject_unit_depth(intr, pose, match.u[rows].double(), match.v[rows].double())
        d_ac = d_ac.index_put((rows,), torch.linalg.vector_norm(a - pose.translation, dim=-1))
        d_ap = d_ap.index_put((rows,), torch.linalg.vector_norm(a - pix, dim=-1))
    return d_ac, d_ap


def matched_image_features(match: AnchorMatch, images, intrinsics, nets: FeatureNets) -> torch.Tensor:
    """Image feature ``g`` at every matched pixel, shape (n, F)."""
    out = None
    for c in torch.unique(match.camera_index).tolist():
        rows = torch.nonzero(match.camera_index == c)[:, 0]
        g = pixel_features(images[c], intrinsics[c], nets, match.u[rows], match.v[rows]).g
        if out is None:
            out = g.new_zeros(len(match), g.shape[-1])
        out = out.index_put((rows,), g)
    if out is None:
        out = torch.zeros(0, nets.out_dim, dtype=torch.float64)
    return out


def init_fusion_net(rng: np.random.Generator, anchor_dim=32, image_dim=32, out_dim=32) -> Mlp:
    return Mlp.init((anchor_dim + image_dim + 2, out_dim), rng)


def fuse_features(net: Mlp, anchor_feature, g_at_pixel, d_ac, d_ap) -> torch.Tensor:
    """Hybrid feature ``h`` from anchor feature, image feature and the two distances.

    Works on single vectors or batches (leading dims broadcast).
    """
    f = as_tensor(anchor_feature)
    g = as_tensor(g_at_pixel)
    d_ac = as_tensor(d_ac)
    d_ap = as_tensor(d_ap)
    x = torch.cat([f, g, d_ac[..., None], d_ap[..., None]], dim=-1)
    if x.shape[-1] != net.in_dim:
        raise ShapeError("fusion shape error")
    return net(x)
