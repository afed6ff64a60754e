"""Per-pixel image features.

Each pixel of a training image is described by its colour and its viewing
ray (normalized image coordinates). Two small MLPs map that description to
a colour feature and a view-direction deviation feature; a linear fusion
layer merges them into the image-based feature ``g`` that anchors pick up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError
from .geometry import DTYPE, Intrinsics, as_tensor

HIDDEN = 32


class Mlp:
    """Stack of affine layers with ReLU between them and identity at the output."""

    def __init__(self, layers):
        self.layers = [(as_tensor(W), as_tensor(b)) for W, b in layers]
        for (W1, _), (W2, _) in zip(self.layers, self.layers[1:]):
            if W2.shape[1] != W1.shape[0]:
                raise ShapeError("mlp shape error")

    @classmethod
    def init(cls, dims, rng: np.random.Generator, out_bias=None, out_gain: float = 1.0) -> "Mlp":
        """Uniform fan-in init, e.g. ``dims=(5, 32, 16)`` for a two-layer net."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == len(dims) - 2:
                W = W * out_gain
                b = b * out_gain
                if out_bias is not None:
                    b = np.asarray(out_bias, dtype=np.float64) + np.zeros(fan_out)
            layers.append((W, b))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def parameters(self):
        return [t for layer in self.layers for t in layer]

    def set_parameters(self, tensors):
        it = iter(tensors)
        self.layers = [(next(it), next(it)) for _ in self.layers]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("mlp shape error")
        for i, (W, b) in enumerate(self.layers):
            x = x @ W.T + b
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def mlp_forward(net: Mlp, x) -> torch.Tensor:
    return net(as_tensor(x))


@dataclass
class FeatureNets:
    color: Mlp  # F_c
    direction: Mlp  # F_d
    fuse: Mlp  # G, single linear layer
    color_sees_ray: bool = True

    @classmethod
    def init(cls, rng, color_dim=16, dir_dim=16, out_dim=32, color_sees_ray=True) -> "FeatureNets":
        c_in = 5 if color_sees_ray else 3
        return cls(
            color=Mlp.init((c_in, HIDDEN, color_dim), rng),
            direction=Mlp.init((5, HIDDEN, dir_dim), rng),
            fuse=Mlp.init((color_dim + dir_dim, out_dim), rng),
            color_sees_ray=color_sees_ray,
        )

    @property
    def out_dim(self) -> int:
        return self.fuse.out_dim

    def parameters(self):
        return self.color.parameters() + self.direction.parameters() + self.fuse.parameters()

    def set_parameters(self, tensors):
        tensors = list(tensors)
        n1 = len(self.color.parameters())
        n2 = n1 + len(self.direction.parameters())
        self.color.set_parameters(tensors[:n1])
        self.direction.set_parameters(tensors[n1:n2])
        self.fuse.set_parameters(tensors[n2:])


@dataclass
class FeatureMap:
    g: torch.Tensor  # (..., F)
    color: torch.Tensor  # (..., F_c)
    deviation: torch.Tensor  # (..., F_d)


def pixel_inputs(image, intr: Intrinsics, u, v) -> torch.Tensor:
    """(r, g, b, u_norm, v_norm) for integer pixel coordinates."""
    image = as_tensor(image)
    u = torch.as_tensor(u, dtype=torch.long)
    v = torch.as_tensor(v, dtype=torch.long)
    rgb = image[v, u]
    un = (u.to(DTYPE) - intr.cx) / intr.fx
    vn = (v.to(DTYPE) - intr.cy) / intr.fy
    return torch.cat([rgb, un[..., None], vn[..., None]], dim=-1)


def features_from_inputs(nets: FeatureNets, x: torch.Tensor) -> FeatureMap:
    c = nets.color(x if nets.color_sees_ray else x[..., :3])
    d = nets.direction(x)
    g = nets.fuse(torch.cat([c, d], dim=-1))
    return FeatureMap(g, c, d)


def pixel_features(image, intr: Intrinsics, nets: FeatureNets, u, v) -> FeatureMap:
    """Features at selected pixels only; equals the full map up to summation order."""
    return features_from_inputs(nets, pixel_inputs(image, intr, u, v))


def extract_pixel_features(image, intr: Intrinsics, nets: FeatureNets) -> FeatureMap:
    """Dense H x W feature map of one image."""
    image = as_tensor(image)
    H, W = image.shape[:2]
    vv, uu = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    return pixel_features(image, intr, nets, uu, vv)
