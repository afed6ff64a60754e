"""Photometric losses, joint scene/pose optimization and test-view registration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergenceError, ShapeError
from .gaussian_decode import NeuralGaussians
from .geometry import DTYPE, CameraPose, Intrinsics, as_tensor, rotation_angle_deg
from .metrics import ssim_torch
from .renderer import render_gaussians
from .state import MODEL_GROUPS, TrainState

log = logging.getLogger(__name__)

LAMBDA_SSIM = 0.2
LAMBDA_VOL = 0.001
TRAIN_STEPS = 30000
DESK_STEPS = 2000
REGISTRATION_ITERS = 200
LOW_OPACITY_PATIENCE = 500


# losses ----------------------------------------------------------------------

def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"image shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(rendered, target) -> torch.Tensor:
    rendered, target = as_tensor(rendered), as_tensor(target)
    _same_shape(rendered, target)
    return (rendered - target).abs().mean()


def loss_ssim(rendered, target) -> torch.Tensor:
    rendered, target = as_tensor(rendered), as_tensor(target)
    _same_shape(rendered, target)
    return 1.0 - ssim_torch(rendered, target)


def loss_vol(gaussians) -> torch.Tensor:
    """Sum over Gaussians of the product of their three scales."""
    scales = gaussians.scales if isinstance(gaussians, NeuralGaussians) else as_tensor(gaussians)
    if scales.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return scales.reshape(-1, 3).prod(dim=-1).sum()


@dataclass
class LossBreakdown:
    l1: float
    ssim_term: float
    vol: float
    total: float
    lambda_ssim: float
    lambda_vol: float
    tensor: torch.Tensor | None = field(default=None, repr=False)

    def as_dict(self):
        return dict(l1=self.l1, ssim_term=self.ssim_term, vol=self.vol, total=self.total)


def loss_total(rendered, target, gaussians, lambda_ssim=LAMBDA_SSIM, lambda_vol=LAMBDA_VOL) -> LossBreakdown:
    l1 = loss_l1(rendered, target)
    ss = loss_ssim(rendered, target)
    vol = loss_vol(gaussians) if gaussians is not None else torch.zeros((), dtype=DTYPE)
    total = l1 + lambda_ssim * ss + lambda_vol * vol
    return LossBreakdown(float(l1.detach()), float(ss.detach()), float(vol.detach()), float(total.detach()),
                         lambda_ssim, lambda_vol, total)


# image pyramid ------------------------------------------------------------------

def pyramid_factors(levels: int):
    """Resolution factors coarse to fine, e.g. 3 levels -> (1/4, 1/2, 1)."""
    return [2.0 ** -(levels - 1 - i) for i in range(levels)]


def downsample(image: torch.Tensor, factor: float):
    H, W = image.shape[:2]
    h, w = max(1, round(H * factor)), max(1, round(W * factor))
    if (h, w) == (H, W):
        return image
    x = image.permute(2, 0, 1)[None]
    return F.interpolate(x, size=(h, w), mode="area")[0].permute(1, 2, 0).contiguous()


def level_view(image: torch.Tensor, intr: Intrinsics, factor: float):
    small = downsample(as_tensor(image), factor)
    h, w = small.shape[:2]
    return small, intr.scaled(w / intr.width, w, h)


# adaptive-moment update -------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment update with moments kept in a dict."""

    def __init__(self, moments: dict, betas=(0.9, 0.999), eps=1e-15):
        self.moments = moments
        self.b1, self.b2 = betas
        self.eps = eps

    @torch.no_grad()
    def update(self, name: str, param: torch.Tensor, grad: torch.Tensor, lr: float):
        m, v, t = self.moments.get(name, (torch.zeros_like(param), torch.zeros_like(param), 0))
        t += 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        param.sub_(lr * mhat / (vhat.sqrt() + self.eps))
        self.moments[name] = (m, v, t)


def cosine(lr: float, t: int, total: int, floor: float = 0.1) -> float:
    frac = min(1.0, t / max(1, total))
    return lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@torch.no_grad()
def normalize_pose_rows(poses: torch.Tensor):
    q = poses[:, 3:]
    q.div_(torch.linalg.vector_norm(q, dim=-1, keepdim=True))


@dataclass
class Schedule:
    steps: int = DESK_STEPS
    levels: int = 3
    lr_model: float = 1e-3
    lr_pose: float = 1e-3
    pose_level_decay: float = 0.5
    lambda_ssim: float = LAMBDA_SSIM
    lambda_vol: float = LAMBDA_VOL
    optimize_poses: bool = True
    seed: int = 0
    lr_overrides: dict = field(default_factory=dict)  # group -> base lr

    def level_of(self, step: int) -> int:
        return min(self.levels - 1, step * self.levels // max(1, self.steps))

    def group_lr(self, group: str, step: int) -> float:
        if group == "poses":
            base = self.lr_overrides.get("poses", self.lr_pose)
            return base * self.pose_level_decay ** self.level_of(step)
        return cosine(self.lr_overrides.get(group, self.lr_model), step, self.steps)


def view_order(n_views: int, steps: int, seed: int):
    """Seeded shuffled cycles over the training views."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < steps:
        out.extend(rng.permutation(n_views).tolist())
    return out[:steps]


def pose_errors(poses, gt_poses):
    """Mean (rotation degrees, translation distance) over paired poses."""
    rot, tr = [], []
    for p, g in zip(poses, gt_poses):
        rot.append(rotation_angle_deg(p.rotmat(), g.rotmat()))
        tr.append(float(torch.linalg.vector_norm(p.translation - g.translation)))
    return float(np.mean(rot)), float(np.mean(tr))


def _track_low_opacity(state: TrainState, g: NeuralGaussians):
    with torch.no_grad():
        n = len(state.anchors)
        amax = torch.zeros(n, dtype=DTYPE).scatter_reduce(0, g.anchor_index, g.opacity.detach(), "amax",
                                                          include_self=True)
        seen = torch.zeros(n, dtype=torch.bool)
        seen[g.anchor_index] = True
        low = seen & (amax < state.alpha_cull)
        state.low_opacity_steps = torch.where(low, state.low_opacity_steps + 1, torch.zeros_like(state.low_opacity_steps))
        state.disabled |= state.low_opacity_steps >= LOW_OPACITY_PATIENCE


def joint_optimize(state: TrainState, targets, schedule: Schedule, gt_poses=None, on_step=None) -> TrainState:
    """Jointly fit model parameters and training poses to the training images.

    ``targets`` are the full-resolution training images aligned with
    ``state.poses``. Each step renders one view at the current pyramid level
    and takes one adaptive-moment step on every unfrozen group. ``on_step``
    receives the per-step record dict.
    """
    if not schedule.optimize_poses:
        state.frozen = set(state.frozen) | {"poses"}
    factors = pyramid_factors(schedule.levels)
    pyramid = [[level_view(t, intr, f) for t, intr in zip(targets, state.intrinsics)] for f in factors]
    order = view_order(len(targets), schedule.steps, schedule.seed)
    adam = Adam(state.moments)
    history = []
    for i in range(schedule.steps):
        level = schedule.level_of(i)
        view = order[i]
        target, intr = pyramid[level][view]
        params = state.trainable()
        for _, p in params:
            p.requires_grad_(True)
        g_all = state.gaussians()
        g = g_all.select(g_all.opacity.detach() >= state.alpha_cull)
        pose = CameraPose.from_vector(state.poses[view])
        out = render_gaussians(g, intr, pose, state.background)
        lb = loss_total(out.image, target, g, schedule.lambda_ssim, schedule.lambda_vol)
        if not math.isfinite(lb.total):
            raise DivergenceError(state.step)
        grads = torch.autograd.grad(lb.tensor, [p for _, p in params], allow_unused=True)
        for (name, p), gr in zip(params, grads):
            if gr is None:
                gr = torch.zeros_like(p)
            if not bool(torch.isfinite(gr).all()):
                raise DivergenceError(state.step)
            adam.update(name, p, gr, schedule.group_lr(state.group_of(name), i))
        for _, p in params:
            p.requires_grad_(False)
        if "poses" not in state.frozen:
            normalize_pose_rows(state.poses)
        _track_low_opacity(state, g_all)
        state.step += 1
        rec = dict(step=state.step, level=level, view=view, **lb.as_dict())
        if gt_poses is not None:
            rot, tr = pose_errors(state.camera_poses(), gt_poses)
            rec.update(rot_err_deg=rot, trans_err=tr)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    state.history.extend(history)
    return state


# test-view registration -------------------------------------------------------------

@dataclass
class Registration:
    pose: CameraPose
    loss_before: float
    loss_after: float
    failed: bool = False
    iterations: int = REGISTRATION_ITERS


def photometric_loss(g: NeuralGaussians, intr, pose_vec, target, lambda_ssim, background, factor=1.0):
    """L1 + SSIM term of one view; with ``factor < 1`` the full-resolution
    render is area-downsampled and compared against the equally downsampled
    target, so every pyramid level shares the same optimum."""
    image = render_gaussians(g, intr, CameraPose.from_vector(pose_vec), background).image
    if factor != 1.0:
        image, target = downsample(image, factor), downsample(as_tensor(target), factor)
    return loss_l1(image, target) + lambda_ssim * loss_ssim(image, target)


def register_test_pose(state: TrainState, test_image, intr: Intrinsics, init_pose: CameraPose,
                       iterations: int = REGISTRATION_ITERS, lr: float = 1e-2, levels: int = 3,
                       lambda_ssim: float = LAMBDA_SSIM, gaussians: NeuralGaussians | None = None,
                       lr_floor: float = 0.2) -> Registration:
    """Fit one test view's pose against the frozen model.

    Only the 7-vector pose is optimized; the model is decoded once, without
    gradients, and never written to. A non-finite loss returns the initial
    pose flagged as failed.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if gaussians is None:
        with torch.no_grad():
            gaussians = state.visible_gaussians()
    g = gaussians.select(slice(None))
    g = NeuralGaussians(*(t.detach() for t in (g.means, g.opacity, g.quats, g.scales, g.colors)), g.anchor_index)
    target = as_tensor(test_image)
    init = init_pose.normalized().as_vector().detach().clone()
    with torch.no_grad():
        before = float(photometric_loss(g, intr, init, target, lambda_ssim, state.background))
    vec = init.clone()
    moments = {}
    adam = Adam(moments)
    factors = pyramid_factors(levels)
    for i in range(iterations):
        level = min(levels - 1, i * levels // iterations)
        vec.requires_grad_(True)
        loss = photometric_loss(g, intr, vec, target, lambda_ssim, state.background, factors[level])
        (grad,) = torch.autograd.grad(loss, [vec])
        vec.requires_grad_(False)
        if not (math.isfinite(float(loss.detach())) and bool(torch.isfinite(grad).all())):
            log.warning("registration diverged at iteration %d", i)
            return Registration(init_pose.normalized(), before, before, failed=True, iterations=iterations)
        adam.update("pose", vec, grad, cosine(lr, i, iterations, floor=lr_floor))
        with torch.no_grad():
            vec[3:] /= torch.linalg.vector_norm(vec[3:])
    with torch.no_grad():
        after = float(photometric_loss(g, intr, vec, target, lambda_ssim, state.background))
    if not math.isfinite(after):
        return Registration(init_pose.normalized(), before, before, failed=True, iterations=iterations)
    return Registration(CameraPose.from_vector(vec).normalized(), before, after, iterations=iterations)
