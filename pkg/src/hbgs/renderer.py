"""Differentiable Gaussian splatting on the CPU.

Gaussians are projected with the local affine (EWA) approximation, sorted
globally by depth and alpha-composited front to back, one pixel at a time
(no tiles). Footprints are Gaussians truncated at 3 sigma and shifted to
reach zero there, so the image is continuous in every splat parameter. The compositing loop and its adjoint are compiled kernels; the
backward pass walks pixels in order and each pixel's splats back to front,
so gradient sums are reproducible bit for bit.

``rasterize_torch`` is an independent pure-torch formulation (pair lists,
segmented cumulative sums, autograd) kept as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ._raster_kernels import EDGE, SIGMA_CUTOFF, bin_pixels, composite_backward, composite_forward
from .gaussian_decode import NeuralGaussians
from .geometry import DTYPE, NEAR, CameraPose, Intrinsics, as_tensor, world_to_cam

COV_FLOOR = 0.3
WEIGHT_CLAMP = 0.999


@dataclass
class Splats:
    """Projected 2D splats, one row each."""

    mean2d: torch.Tensor  # (N, 2) pixels
    cov2d: torch.Tensor  # (N, 2, 2) pixels^2
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def __len__(self):
        return int(self.depth.shape[0])

    def select(self, idx) -> "Splats":
        return Splats(self.mean2d[idx], self.cov2d[idx], self.depth[idx], self.opacity[idx], self.colors[idx])


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    splat_count: torch.Tensor  # (H, W) long
    n_splats: int = 0


def project_gaussians(g: NeuralGaussians, intr: Intrinsics, pose: CameraPose) -> Splats:
    """EWA projection; Gaussians at or behind the near threshold are culled."""
    p = world_to_cam(pose, g.means)
    keep = p[:, 2] > NEAR
    p = p[keep]
    x, y, z = p.unbind(-1)
    mean2d = torch.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([intr.fx / z, zero, -intr.fx * x / z ** 2], dim=-1),
        torch.stack([zero, intr.fy / z, -intr.fy * y / z ** 2], dim=-1),
    ], dim=-2)
    M = J @ pose.rotmat().T
    sigma = g.select(keep).covariances()
    cov2d = M @ sigma @ M.transpose(-1, -2) + COV_FLOOR * torch.eye(2, dtype=DTYPE)
    return Splats(mean2d, cov2d, z, g.opacity[keep], g.colors[keep])


def project_gaussian(g: NeuralGaussians, intr: Intrinsics, pose: CameraPose) -> Splats | None:
    """Single-Gaussian projection; None means culled."""
    s = project_gaussians(g, intr, pose)
    return s if len(s) else None


def _boxes(splats: Splats, H: int, W: int):
    """Inclusive integer pixel boxes covering each splat's 3-sigma extent, clipped to the image.

    Empty boxes have ``x0 > x1`` or ``y0 > y1``.
    """
    with torch.no_grad():
        c = splats.cov2d
        mid = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
        det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        r = SIGMA_CUTOFF * torch.sqrt(lam)
        m = splats.mean2d
        finite = torch.isfinite(r) & torch.isfinite(m).all(-1)
        r = torch.where(finite, r, torch.zeros_like(r))
        m = torch.where(finite[:, None], m, torch.full_like(m, -1e9))
        x0 = torch.ceil(m[:, 0] - r).clamp(min=0, max=W)
        x1 = torch.floor(m[:, 0] + r).clamp(min=-1, max=W - 1)
        y0 = torch.ceil(m[:, 1] - r).clamp(min=0, max=H)
        y1 = torch.floor(m[:, 1] + r).clamp(min=-1, max=H - 1)
    return x0.long(), x1.long(), y0.long(), y1.long()


def _pairs(splats: Splats, H: int, W: int):
    """Every (splat, pixel) pair inside the splat boxes."""
    with torch.no_grad():
        x0, x1, y0, y1 = _boxes(splats, H, W)
        nx = (x1 - x0 + 1).clamp(min=0)
        ny = (y1 - y0 + 1).clamp(min=0)
        area = nx * ny
        total = int(area.sum())
        sid = torch.repeat_interleave(torch.arange(len(splats)), area)
        start = torch.cumsum(area, 0) - area
        local = torch.arange(total) - start[sid]
        px = x0[sid] + local % nx[sid]
        py = y0[sid] + torch.div(local, nx[sid], rounding_mode="floor")
    return sid, px, py


def _conic(cov2d: torch.Tensor) -> torch.Tensor:
    """Inverse 2x2 covariance packed as (a, b, c) with q = a dx^2 + b dx dy + c dy^2."""
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    return torch.stack([cov2d[:, 1, 1] / det, -(cov2d[:, 0, 1] + cov2d[:, 1, 0]) / det, cov2d[:, 0, 0] / det], dim=-1)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, colors, bg, ids, offsets, H, W):
        arrays = [t.detach().contiguous().numpy() for t in (mean2d, conic, opacity, colors, bg)]
        image, t_final, t_pair = composite_forward(ids, offsets, *arrays, H, W)
        ctx.arrays = arrays
        ctx.lists = (ids, offsets, t_final, t_pair, H, W)
        ctx.t_final = t_final
        return torch.from_numpy(image), torch.from_numpy(t_final)

    @staticmethod
    def backward(ctx, grad_image, grad_t_final):
        ids, offsets, t_final, t_pair, H, W = ctx.lists
        g = composite_backward(ids, offsets, *ctx.arrays, t_final, t_pair,
                               grad_image.contiguous().numpy(), H, W)
        return tuple(torch.from_numpy(x) for x in g) + (None, None, None, None)


def rasterize(splats: Splats, H: int, W: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Front-to-back compositing of depth-sorted splats.

    Equal depths composite in input order. Gradients flow to the splat
    means, covariances, opacities, colours and the background; the alpha
    map is returned detached.
    """
    bg = as_tensor(background)
    if len(splats) == 0:
        image = bg.expand(H, W, 3).clone()
        return RenderOutput(image, torch.zeros(H, W, dtype=DTYPE), torch.zeros(H, W, dtype=torch.long), 0)
    with torch.no_grad():
        order = torch.argsort(splats.depth, stable=True)
    s = splats.select(order)
    x0, x1, y0, y1 = _boxes(s, H, W)
    ids, offsets = bin_pixels(x0.numpy(), x1.numpy(), y0.numpy(), y1.numpy(), H, W)
    image, t_final = _Composite.apply(s.mean2d, _conic(s.cov2d), s.opacity, s.colors, bg, ids, offsets, H, W)
    counts = torch.from_numpy(np.diff(offsets)).reshape(H, W)
    return RenderOutput(image.reshape(H, W, 3), (1.0 - t_final.detach()).reshape(H, W), counts, len(splats))


def rasterize_torch(splats: Splats, H: int, W: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Pure-torch compositing differentiated by autograd.

    Slower than :func:`rasterize` but written independently of the
    hand-derived kernel gradients, so the two can check each other.
    """
    bg = as_tensor(background)
    npix = H * W
    if len(splats) == 0:
        image = bg.expand(H, W, 3).clone()
        return RenderOutput(image, torch.zeros(H, W, dtype=DTYPE), torch.zeros(H, W, dtype=torch.long), 0)

    sid, px, py = _pairs(splats, H, W)
    with torch.no_grad():
        order = torch.argsort(splats.depth, stable=True)
        rank = torch.empty_like(order)
        rank[order] = torch.arange(len(order))
        pix = py * W + px
        key = pix * len(splats) + rank[sid]
        perm = torch.argsort(key)
        sid, pix = sid[perm], pix[perm]
        d_px = torch.stack([px[perm], py[perm]], dim=-1).to(DTYPE)
        pos = torch.arange(len(pix))
        is_start = torch.ones_like(pix, dtype=torch.bool)
        is_start[1:] = pix[1:] != pix[:-1]
        first = torch.cummax(torch.where(is_start, pos, torch.zeros_like(pos)), 0)[0]

    # per-splat conic, then one gather of everything a pair needs
    conic = _conic(splats.cov2d)
    packed = torch.cat([splats.mean2d, conic, splats.opacity[:, None], splats.colors], dim=-1)[sid]
    mx, my, ca, cb, cc, op, r, g, b = packed.unbind(-1)
    dx = d_px[:, 0] - mx
    dy = d_px[:, 1] - my
    q = ca * dx * dx + cb * dx * dy + cc * dy * dy
    w = torch.clamp(op * (torch.exp(-0.5 * q) - EDGE) / (1.0 - EDGE), min=0.0, max=WEIGHT_CLAMP)
    log_t = torch.log1p(-w)
    incl = torch.cumsum(log_t, 0)
    excl = incl - log_t
    T = torch.exp(excl - excl[first])

    contrib = (w * T)[:, None] * torch.stack([r, g, b], dim=-1)
    accum = torch.zeros(npix, 3, dtype=DTYPE).index_add(0, pix, contrib)
    log_final = torch.zeros(npix, dtype=DTYPE).index_add(0, pix, log_t)
    t_final = torch.exp(log_final)
    image = accum + t_final[:, None] * bg
    counts = torch.bincount(pix, minlength=npix)
    return RenderOutput(image.reshape(H, W, 3), (1.0 - t_final).reshape(H, W), counts.reshape(H, W), len(splats))


def render_gaussians(g: NeuralGaussians, intr: Intrinsics, pose: CameraPose, background=(0.0, 0.0, 0.0),
                     rasterizer=None) -> RenderOutput:
    return (rasterizer or rasterize)(project_gaussians(g, intr, pose), intr.height, intr.width, background)


def render(state, intr: Intrinsics, pose: CameraPose, background=None) -> RenderOutput:
    """Decode the scene held by a TrainState and splat it into one view."""
    bg = state.background if background is None else background
    return render_gaussians(state.visible_gaussians(), intr, pose, bg)
