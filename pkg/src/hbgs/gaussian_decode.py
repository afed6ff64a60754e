"""Decoding k neural Gaussians per anchor from hybrid features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import DTYPE, quat_to_rotmat
from .image_features import HIDDEN, Mlp

DEFAULT_K = 10
ALPHA_CULL = 0.005
IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass
class NeuralGaussians:
    """A batch of decoded Gaussians (one row per Gaussian)."""

    means: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,)
    quats: torch.Tensor  # (N, 4) unit
    scales: torch.Tensor  # (N, 3) positive
    colors: torch.Tensor  # (N, 3) in (0, 1)
    anchor_index: torch.Tensor  # (N,) long

    def __len__(self):
        return int(self.means.shape[0])

    def select(self, mask) -> "NeuralGaussians":
        return NeuralGaussians(self.means[mask], self.opacity[mask], self.quats[mask],
                               self.scales[mask], self.colors[mask], self.anchor_index[mask])

    def covariances(self) -> torch.Tensor:
        R = quat_to_rotmat(self.quats)
        return R @ torch.diag_embed(self.scales ** 2) @ R.transpose(-1, -2)

    @classmethod
    def empty(cls) -> "NeuralGaussians":
        z = torch.zeros
        return cls(z(0, 3, dtype=DTYPE), z(0, dtype=DTYPE), z(0, 4, dtype=DTYPE),
                   z(0, 3, dtype=DTYPE), z(0, 3, dtype=DTYPE), z(0, dtype=torch.long))


@dataclass
class DecoderBank:
    opacity: Mlp  # (h, d_ap) -> k
    rotation: Mlp  # h -> 4k
    scale: Mlp  # h -> 3k
    color: Mlp  # h -> 3k
    offset: Mlp  # h -> 3k
    k: int
    offset_scale: float

    HEADS = ("opacity", "rotation", "scale", "color", "offset")

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim=32, k=DEFAULT_K, offset_scale=1.0) -> "DecoderBank":
        return cls(
            opacity=Mlp.init((feature_dim + 1, HIDDEN, k), rng),
            rotation=Mlp.init((feature_dim, HIDDEN, 4 * k), rng, out_bias=np.tile(IDENTITY_QUAT, k), out_gain=0.1),
            scale=Mlp.init((feature_dim, HIDDEN, 3 * k), rng, out_gain=0.1),
            color=Mlp.init((feature_dim, HIDDEN, 3 * k), rng),
            offset=Mlp.init((feature_dim, HIDDEN, 3 * k), rng),
            k=k,
            offset_scale=float(offset_scale),
        )

    def heads(self):
        return [getattr(self, name) for name in self.HEADS]

    def parameters(self):
        return [t for head in self.heads() for t in head.parameters()]

    def set_parameters(self, tensors):
        tensors = list(tensors)
        i = 0
        for head in self.heads():
            n = len(head.parameters())
            head.set_parameters(tensors[i:i + n])
            i += n


def decode_opacity(bank: DecoderBank, h, d_ap) -> torch.Tensor:
    """(..., k) opacities in (0, 1)."""
    d_ap = torch.as_tensor(d_ap, dtype=DTYPE)
    return torch.sigmoid(bank.opacity(torch.cat([h, d_ap[..., None]], dim=-1)))


def decode_covariance(bank: DecoderBank, h):
    """(..., k, 4) unit quaternions and (..., k, 3) positive scales."""
    raw = bank.rotation(h).reshape(*h.shape[:-1], bank.k, 4)
    n = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
    ident = torch.tensor(IDENTITY_QUAT, dtype=DTYPE).expand_as(raw)
    degenerate = n < 1e-12
    q = torch.where(degenerate, ident, raw / torch.where(degenerate, torch.ones_like(n), n))
    s = torch.exp(bank.scale(h).reshape(*h.shape[:-1], bank.k, 3)) * bank.offset_scale
    return q, s


def decode_color(bank: DecoderBank, h) -> torch.Tensor:
    return torch.sigmoid(bank.color(h).reshape(*h.shape[:-1], bank.k, 3))


def decode_positions(bank: DecoderBank, anchor_position, h) -> torch.Tensor:
    off = bank.offset(h).reshape(*h.shape[:-1], bank.k, 3)
    return anchor_position[..., None, :] + bank.offset_scale * off


def decode_all(bank: DecoderBank, h: torch.Tensor, d_ap: torch.Tensor, anchor_pos: torch.Tensor,
               anchor_index: torch.Tensor) -> NeuralGaussians:
    """Every Gaussian of every matched anchor, flattened anchor-major.

    ``h``, ``d_ap``, ``anchor_pos`` and ``anchor_index`` are aligned rows of
    the matched anchors; unmatched anchors are simply absent.
    """
    if h.shape[0] == 0:
        return NeuralGaussians.empty()
    k = bank.k
    alpha = decode_opacity(bank, h, d_ap)
    q, s = decode_covariance(bank, h)
    c = decode_color(bank, h)
    mu = decode_positions(bank, anchor_pos, h)
    return NeuralGaussians(
        means=mu.reshape(-1, 3),
        opacity=alpha.reshape(-1),
        quats=q.reshape(-1, 4),
        scales=s.reshape(-1, 3),
        colors=c.reshape(-1, 3),
        anchor_index=anchor_index.repeat_interleave(k),
    )


def visible(gaussians: NeuralGaussians, alpha_cull: float = ALPHA_CULL) -> NeuralGaussians:
    """Drop Gaussians whose opacity is below the culling threshold."""
    with torch.no_grad():
        keep = gaussians.opacity >= alpha_cull
    return gaussians.select(keep)
