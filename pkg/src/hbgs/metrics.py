"""PSNR and SSIM for images with values in [0, 1].

``ssim_torch`` is differentiable and backs both the metric and the SSIM
loss term. Windows near the border read edge-clamped pixels, so every
pixel gets a full 11x11 window regardless of image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .geometry import DTYPE, as_tensor

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"image shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a = np.asarray(as_tensor(a).detach(), dtype=np.float64)
    b = np.asarray(as_tensor(b).detach(), dtype=np.float64)
    _check(a, b)
    # correctly rounded sum, so a uniform 0.1 offset gives exactly 20 dB
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # x: (C, H, W); separable blur with edge-clamped borders
    r = win.shape[0] // 2
    C = x.shape[0]
    x = F.pad(x[None], (r, r, r, r), mode="replicate")
    kx = win.view(1, 1, 1, -1).expand(C, 1, 1, -1)
    ky = win.view(1, 1, -1, 1).expand(C, 1, -1, 1)
    x = F.conv2d(x, kx, groups=C)
    x = F.conv2d(x, ky, groups=C)
    return x[0]


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel SSIM of (H, W, C) images, returned as (C, H, W)."""
    _check(a, b)
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    win = gaussian_window()
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim_torch(a, b) -> torch.Tensor:
    return ssim_map(as_tensor(a), as_tensor(b)).mean()


def ssim(a, b) -> float:
    return float(ssim_torch(as_tensor(a).detach(), as_tensor(b).detach()))


def ssim_reference(a, b) -> float:
    """Direct per-pixel SSIM with explicit clamped windows; slow, for cross-checks."""
    a = np.asarray(as_tensor(a).detach(), dtype=np.float64)
    b = np.asarray(as_tensor(b).detach(), dtype=np.float64)
    _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    g = np.asarray(gaussian_window())
    w2 = np.outer(g, g)
    r = WINDOW // 2
    total = 0.0
    for ch in range(C):
        for i in range(H):
            rows = np.clip(np.arange(i - r, i + r + 1), 0, H - 1)
            for j in range(W):
                cols = np.clip(np.arange(j - r, j + r + 1), 0, W - 1)
                pa = a[np.ix_(rows, cols, [ch])][..., 0]
                pb = b[np.ix_(rows, cols, [ch])][..., 0]
                mx = np.sum(w2 * pa)
                my = np.sum(w2 * pb)
                sxx = np.sum(w2 * pa * pa) - mx * mx
                syy = np.sum(w2 * pb * pb) - my * my
                sxy = np.sum(w2 * pa * pb) - mx * my
                total += ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
    return total / (H * W * C)


def psnr_reference(a, b) -> float:
    a = np.asarray(as_tensor(a).detach(), dtype=np.float64).ravel()
    b = np.asarray(as_tensor(b).detach(), dtype=np.float64).ravel()
    _check(a, b)
    s = 0.0
    for x, y in zip(a, b):
        s += (x - y) * (x - y)
    mse = s / len(a)
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class MetricReport:
    views: list = field(default_factory=list)  # dicts with name, psnr, ssim

    def add(self, name, rendered, target):
        self.views.append(dict(name=name, psnr=psnr(rendered, target), ssim=ssim(rendered, target)))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.views])) if self.views else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.views])) if self.views else float("nan")

    def to_dict(self) -> dict:
        return dict(
            views=[dict(v, psnr=json_float(v["psnr"]), lpips="n/a") for v in self.views],
            mean=dict(psnr=json_float(self.mean_psnr), ssim=self.mean_ssim, lpips="n/a"),
        )


def json_float(x: float):
    """JSON-safe number: infinite PSNR becomes the string "inf"."""
    return "inf" if math.isinf(x) else x
