"""Verification suites: finite-difference gradient checks and brute-force oracles.

Each suite returns a list of :class:`Check` rows; ``hbgs verify`` prints them
and exits non-zero on any failure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .anchors import voxelize
from .fusion import fuse_features, init_fusion_net, match_camera, match_pixel
from .gaussian_decode import DecoderBank, decode_color, decode_covariance, decode_opacity, decode_positions
from .geometry import DTYPE, CameraPose, Intrinsics, axis_angle_to_quat, backproject_unit_depth
from .image_features import Mlp, mlp_forward
from .metrics import psnr, psnr_reference, ssim, ssim_reference
from .optimizer import loss_ssim, loss_total, loss_vol
from .renderer import render_gaussians
from .state import TrainState

GRAD_TOL = 1e-3
PIPELINE_TOL = 5e-3
FD_STEP = 1e-6


@dataclass
class Check:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.suite}/{self.name}: {self.value:.3e} (threshold {self.threshold:.0e})"


def _check(suite, name, value, threshold) -> Check:
    return Check(suite, name, float(value), threshold, bool(value < threshold))


# finite differences ----------------------------------------------------------------

def finite_difference(f, x: torch.Tensor, indices=None, h: float = FD_STEP) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.detach().view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(flat.numel(), dtype=DTYPE)
    with torch.no_grad():
        for i in idx:
            old = float(flat[i])
            flat[i] = old + h
            fp = float(f())
            flat[i] = old - h
            fm = float(f())
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out.view_as(x)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def _autograd(f, params):
    for p in params:
        p.requires_grad_(True)
    out = f()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    for p in params:
        p.requires_grad_(False)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _compare(suite, name, f, params, threshold, subset=None, rng=None):
    """Max relative error over ``params`` (optionally ``subset`` random entries each)."""
    grads = _autograd(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        idx = None
        if subset is not None and p.numel() > subset:
            idx = sorted(rng.choice(p.numel(), size=subset, replace=False).tolist())
        num = finite_difference(f, p, idx)
        if idx is not None:
            sel = torch.tensor(idx)
            worst = max(worst, relative_error(g.reshape(-1)[sel], num.reshape(-1)[sel]))
        else:
            worst = max(worst, relative_error(g, num))
    return _check(suite, name, worst, threshold)


def _weights(rng, shape):
    return torch.from_numpy(rng.normal(size=shape))


# gradient suite ---------------------------------------------------------------------

def tiny_state(seed: int = 0, size: int = 12):
    """A few anchors seen by two small cameras; images are smooth random fields."""
    rng = np.random.default_rng(seed)
    points = rng.uniform(-0.3, 0.3, size=(6, 3))
    intr = Intrinsics(fx=14.0, fy=14.0, cx=size / 2 - 0.5, cy=size / 2 - 0.5, width=size, height=size)
    poses = []
    for ang in (-8.0, 8.0):
        q = axis_angle_to_quat([0.0, 1.0, 0.0], math.radians(ang))
        poses.append(CameraPose(q, torch.tensor([-2.0 * math.sin(math.radians(ang)), 0.0, -2.0], dtype=DTYPE)))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = [np.stack([0.5 + 0.3 * np.sin(3 * xx + c + i) * np.cos(2 * yy - c) for c in range(3)], -1)
              for i in range(2)]
    state = TrainState.create(points, [intr, intr], poses, images, voxel_scale=0.15, extent=0.6, feature_dim=8, k=3,
                              seed=seed)
    return state, images


def gradient_suite(seed: int = 0):
    rng = np.random.default_rng(seed)
    s = "gradients"
    out = []

    net = Mlp.init((5, 7, 4), rng)
    x = torch.from_numpy(rng.normal(size=(6, 5)))
    w = _weights(rng, (6, 4))
    out.append(_compare(s, "mlp_forward", lambda: (mlp_forward(net, x) * w).sum(), net.parameters() + [x], GRAD_TOL))

    fnet = init_fusion_net(rng, 6, 5, 4)
    f, g = torch.from_numpy(rng.normal(size=(3, 6))), torch.from_numpy(rng.normal(size=(3, 5)))
    d_ac, d_ap = torch.from_numpy(rng.uniform(1, 3, 3)), torch.from_numpy(rng.uniform(0, 1, 3))
    w = _weights(rng, (3, 4))
    out.append(_compare(s, "fuse_features", lambda: (fuse_features(fnet, f, g, d_ac, d_ap) * w).sum(),
                        fnet.parameters() + [f, g, d_ac, d_ap], GRAD_TOL))

    k = 3
    bank = DecoderBank.init(rng, 6, k, offset_scale=0.5)
    h = torch.from_numpy(rng.normal(size=(4, 6)))
    d = torch.from_numpy(rng.uniform(0.1, 1.0, 4))
    pos = torch.from_numpy(rng.normal(size=(4, 3)))
    heads = {
        "opacity": (lambda: decode_opacity(bank, h, d), bank.opacity, [d]),
        "rotation": (lambda: decode_covariance(bank, h)[0], bank.rotation, []),
        "scale": (lambda: decode_covariance(bank, h)[1], bank.scale, []),
        "color": (lambda: decode_color(bank, h), bank.color, []),
        "offset": (lambda: decode_positions(bank, pos, h), bank.offset, [pos]),
    }
    for name, (fn, head, extra) in heads.items():
        w = _weights(rng, tuple(fn().shape))
        out.append(_compare(s, f"decoder.{name}", lambda fn=fn, w=w: (fn() * w).sum(),
                            head.parameters() + [h] + extra, GRAD_TOL))

    a = torch.from_numpy(rng.uniform(0, 1, (12, 12, 3)))
    b = torch.from_numpy(rng.uniform(0, 1, (12, 12, 3)))
    out.append(_compare(s, "loss_ssim", lambda: loss_ssim(a, b), [a], GRAD_TOL))

    scales = torch.from_numpy(rng.uniform(0.5, 2.0, (5, 3)))
    analytic = _autograd(lambda: loss_vol(scales), [scales])[0]
    product_rule = torch.stack([scales[:, 1] * scales[:, 2], scales[:, 0] * scales[:, 2],
                                scales[:, 0] * scales[:, 1]], dim=-1)
    out.append(_check(s, "loss_vol", float((analytic - product_rule).abs().max()), 1e-10))

    state, images = tiny_state(seed)
    target = torch.as_tensor(images[0])
    intr = state.intrinsics[0]

    def pipeline():
        gs = state.gaussians()
        image = render_gaussians(gs, intr, CameraPose.from_vector(state.poses[0]), state.background).image
        return loss_total(image, target, gs).tensor

    state.rematch(force=True)
    out.append(_compare(s, "pipeline.poses", pipeline, [state.poses], PIPELINE_TOL))
    groups = {}
    for name, p in state.named_parameters():
        if state.group_of(name) != "poses":
            groups.setdefault(state.group_of(name), []).append(p)
    for group, params in groups.items():
        out.append(_compare(s, f"pipeline.{group}", pipeline, params, PIPELINE_TOL, subset=6, rng=rng))
    return out


# matching suite ------------------------------------------------------------------------

def _brute_voxelize(points, eps):
    seen = []
    for p in points:
        key = tuple(math.floor(abs(c) / eps + 0.5) * (1 if c >= 0 else -1) for c in p)
        if key not in seen:
            seen.append(key)
    return np.array(sorted(seen), dtype=float) * eps


def matching_suite(seed: int = 0, n_clouds: int = 1000):
    rng = np.random.default_rng(seed)
    s = "matching"
    bad = 0
    for _ in range(n_clouds):
        n = int(rng.integers(1, 40))
        eps = float(rng.uniform(0.05, 0.5))
        pts = rng.normal(size=(n, 3))
        got = voxelize(pts, eps)
        ref = _brute_voxelize(pts, eps)
        bad += got.shape != ref.shape or not np.allclose(got, ref, rtol=0, atol=1e-12)
    out = [_check(s, "voxelize_vs_bruteforce", bad, 1)]

    bad = 0
    for _ in range(200):
        centers = rng.integers(-2, 3, size=(int(rng.integers(1, 8)), 3)).astype(float)
        anchor = rng.integers(-2, 3, size=3).astype(float)
        idx, dist = match_camera(anchor, centers)
        d = [float(np.linalg.norm(anchor - c)) for c in centers]
        ref = min(range(len(d)), key=lambda i: (d[i], i))
        bad += idx != ref or abs(float(dist) - d[ref]) > 1e-12
    out.append(_check(s, "match_camera_vs_argmin", bad, 1))

    bad = 0
    for _ in range(200):
        w, h = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        intr = Intrinsics(fx=float(rng.uniform(4, 20)), fy=float(rng.uniform(4, 20)), cx=float(rng.uniform(0.1, w - 0.1)),
                          cy=float(rng.uniform(0.1, h - 0.1)), width=w, height=h)
        axis = rng.normal(size=3)
        pose = CameraPose(axis_angle_to_quat(axis, float(rng.uniform(0, 0.5))), torch.from_numpy(rng.normal(size=3)))
        p_cam = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.2, 4)])
        anchor = (pose.rotmat() @ torch.from_numpy(p_cam) + pose.translation)
        (u, v), dist = match_pixel(anchor, intr, pose)
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = backproject_unit_depth(intr, pose, torch.from_numpy(uu.ravel()), torch.from_numpy(vv.ravel()))
        dd = torch.linalg.vector_norm(pix - anchor, dim=-1)
        best = float(dd.min())
        # ties between pixels are allowed; the chosen pixel must attain the minimum
        bad += abs(float(dist) - best) > 1e-9 or abs(float(dd[v * w + u]) - best) > 1e-9
    out.append(_check(s, "match_pixel_vs_exhaustive", bad, 1))
    return out


# metrics suite ------------------------------------------------------------------------------

def metrics_suite(seed: int = 0):
    rng = np.random.default_rng(seed)
    s = "metrics"
    a = rng.uniform(0.1, 0.9, (32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    return [
        _check(s, "psnr_uniform_0.1", abs(psnr(a, a + 0.1) - 20.0), 1e-9),
        _check(s, "ssim_identity", abs(ssim(a, a) - 1.0), 1e-12),
        _check(s, "psnr_vs_naive", abs(psnr(a, b) - psnr_reference(a, b)), 1e-9),
        _check(s, "ssim_vs_naive", abs(ssim(a, b) - ssim_reference(a, b)), 1e-9),
    ]


SUITES = {"gradients": gradient_suite, "matching": matching_suite, "metrics": metrics_suite}


def run_suites(names=None, seed: int = 0):
    names = list(SUITES) if not names or names == ["all"] else names
    return list(itertools.chain.from_iterable(SUITES[n](seed) for n in names))
