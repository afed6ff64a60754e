"""The learnable scene: anchors, networks, training poses and optimizer moments."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .anchors import AnchorSet, build_anchors
from .fusion import AnchorMatch, compute_matches, fuse_features, init_fusion_net, match_distances, matched_image_features
from .gaussian_decode import ALPHA_CULL, DEFAULT_K, DecoderBank, NeuralGaussians, decode_all, visible
from .geometry import DTYPE, CameraPose, Intrinsics, as_tensor, quat_multiply, quat_conjugate
from .image_features import FeatureNets, Mlp

GROUPS = ("anchor_features", "image_features", "fusion", "decoders", "poses")
MODEL_GROUPS = GROUPS[:-1]


def _mlp_named(prefix: str, net: Mlp):
    out = []
    for i, (W, b) in enumerate(net.layers):
        out.append((f"{prefix}.{i}.weight", W))
        out.append((f"{prefix}.{i}.bias", b))
    return out


def pose_delta(a: torch.Tensor, b: torch.Tensor):
    """(rotation degrees, translation distance) between two 7-vector poses."""
    qa = a[3:] / torch.linalg.vector_norm(a[3:])
    qb = b[3:] / torch.linalg.vector_norm(b[3:])
    rel = quat_multiply(quat_conjugate(qa), qb)
    ang = 2.0 * math.degrees(math.atan2(float(torch.linalg.vector_norm(rel[1:])), abs(float(rel[0]))))
    return ang, float(torch.linalg.vector_norm(a[:3] - b[:3]))


@dataclass
class TrainState:
    anchors: AnchorSet
    feature_nets: FeatureNets
    fusion_net: Mlp
    decoders: DecoderBank
    poses: torch.Tensor  # (V, 7) training-view poses, translation then quaternion
    intrinsics: list
    images: list  # full-resolution training rasters (H, W, 3)
    extent: float = 1.0
    use_image_features: bool = True
    alpha_cull: float = ALPHA_CULL
    background: tuple = (0.0, 0.0, 0.0)
    step: int = 0
    frozen: set = field(default_factory=set)
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    disabled: torch.Tensor | None = None  # (N,) bool, anchors switched off for low opacity
    low_opacity_steps: torch.Tensor | None = None
    history: list = field(default_factory=list, repr=False)
    match: AnchorMatch | None = field(default=None, repr=False)
    match_poses: torch.Tensor | None = field(default=None, repr=False)

    @classmethod
    def create(cls, points, intrinsics, poses, images, *, voxel_scale, extent, feature_dim=32, k=DEFAULT_K,
               seed=0, use_image_features=True, alpha_cull=ALPHA_CULL, background=(0.0, 0.0, 0.0)) -> "TrainState":
        anchors = build_anchors(points, voxel_scale, feature_dim, seed)
        rng = np.random.default_rng(seed + 1)
        nets = FeatureNets.init(rng, out_dim=feature_dim)
        fusion = init_fusion_net(rng, feature_dim, nets.out_dim, feature_dim)
        dec = DecoderBank.init(rng, feature_dim, k, offset_scale=voxel_scale)
        pose_vec = torch.stack([p.normalized().as_vector() for p in poses]).clone()
        n = len(anchors)
        return cls(anchors, nets, fusion, dec, pose_vec, list(intrinsics), [as_tensor(im) for im in images],
                   extent=float(extent), use_image_features=use_image_features, alpha_cull=alpha_cull,
                   background=tuple(background), disabled=torch.zeros(n, dtype=torch.bool),
                   low_opacity_steps=torch.zeros(n, dtype=torch.long))

    # parameters -----------------------------------------------------------

    def named_parameters(self):
        out = [("anchor_features", self.anchors.features)]
        for name in ("color", "direction", "fuse"):
            out += _mlp_named(f"image_features.{name}", getattr(self.feature_nets, name))
        out += _mlp_named("fusion", self.fusion_net)
        for name in DecoderBank.HEADS:
            out += _mlp_named(f"decoders.{name}", getattr(self.decoders, name))
        out.append(("poses", self.poses))
        return out

    def set_parameters(self, named: dict):
        """Replace parameter tensors by name (used when loading checkpoints)."""
        self.anchors.features = named["anchor_features"]
        for name in ("color", "direction", "fuse"):
            net = getattr(self.feature_nets, name)
            net.set_parameters([named[n] for n, _ in _mlp_named(f"image_features.{name}", net)])
        self.fusion_net.set_parameters([named[n] for n, _ in _mlp_named("fusion", self.fusion_net)])
        for name in DecoderBank.HEADS:
            net = getattr(self.decoders, name)
            net.set_parameters([named[n] for n, _ in _mlp_named(f"decoders.{name}", net)])
        self.poses = named["poses"]

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if self.group_of(n) not in self.frozen]

    def model_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            if self.group_of(name) in MODEL_GROUPS:
                h.update(name.encode())
                h.update(p.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def pose_bytes(self) -> bytes:
        return self.poses.detach().contiguous().numpy().tobytes()

    # scene ----------------------------------------------------------------

    def camera_poses(self):
        return [CameraPose.from_vector(self.poses[i]) for i in range(self.poses.shape[0])]

    def needs_rematch(self, rot_deg=0.1, trans_frac=1e-3) -> bool:
        if self.match is None:
            return True
        for a, b in zip(self.match_poses, self.poses.detach()):
            ang, dt = pose_delta(a, b)
            if ang > rot_deg or dt > trans_frac * self.extent:
                return True
        return False

    def rematch(self, force=False):
        if force or self.needs_rematch():
            poses = [CameraPose.from_vector(p) for p in self.poses.detach()]
            self.match = compute_matches(self.anchors.positions, self.intrinsics, poses)
            self.match_poses = self.poses.detach().clone()
        return self.match

    def hybrid_features(self):
        """(match, h, d_ap) for the currently matched, enabled anchors."""
        match = self.rematch()
        if self.disabled is not None and bool(self.disabled.any()):
            keep = ~self.disabled[match.anchor_index]
            match = AnchorMatch(match.anchor_index[keep], match.camera_index[keep], match.u[keep], match.v[keep])
        poses = self.camera_poses()
        d_ac, d_ap = match_distances(match, self.anchors.positions, self.intrinsics, poses)
        if self.use_image_features:
            g = matched_image_features(match, self.images, self.intrinsics, self.feature_nets)
        else:
            g = torch.zeros(len(match), self.feature_nets.out_dim, dtype=DTYPE)
        f = self.anchors.features[match.anchor_index]
        h = fuse_features(self.fusion_net, f, g, d_ac, d_ap)
        return match, h, d_ap

    def gaussians(self) -> NeuralGaussians:
        match, h, d_ap = self.hybrid_features()
        idx = match.anchor_index
        return decode_all(self.decoders, h, d_ap, self.anchors.positions[idx], idx)

    def visible_gaussians(self) -> NeuralGaussians:
        return visible(self.gaussians(), self.alpha_cull)
