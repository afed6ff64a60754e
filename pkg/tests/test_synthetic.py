import numpy as np
import torch

from hbgs.geometry import rotation_angle_deg
from hbgs.synthetic import SyntheticSceneSpec, generate_synthetic_scene


def test_default_spec():
    s = SyntheticSceneSpec()
    assert (s.seed, s.n_points, s.n_cameras, s.width, s.height) == (7, 500, 12, 64, 64)


def test_zero_noise_copies_poses():
    gt, noisy = generate_synthetic_scene(SyntheticSceneSpec(n_points=30, pose_noise_rot_deg=0, pose_noise_trans=0,
                                                            width=16, height=16))
    for a, b in zip(gt.poses, noisy.poses):
        assert torch.equal(a.as_vector(), b.as_vector())


def test_same_seed_same_bundles():
    spec = SyntheticSceneSpec(n_points=30, width=16, height=16)
    a, an = generate_synthetic_scene(spec)
    b, bn = generate_synthetic_scene(spec)
    assert np.array_equal(a.points, b.points)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert all(torch.equal(x.as_vector(), y.as_vector()) for x, y in zip(an.poses, bn.poses))


def test_noise_magnitudes():
    spec = SyntheticSceneSpec(n_points=30, width=16, height=16)
    gt, noisy = generate_synthetic_scene(spec)
    for a, b in zip(gt.poses, noisy.poses):
        assert rotation_angle_deg(a.rotmat(), b.rotmat()) <= 5.0 + 1e-9
        d = float(torch.linalg.vector_norm(a.translation - b.translation))
        assert abs(d - 0.02 * spec.scene_extent) < 1e-12


def test_images_are_valid_and_points_visible():
    gt, _ = generate_synthetic_scene(SyntheticSceneSpec(n_points=100, width=32, height=32))
    for im in gt.images:
        assert im.shape == (32, 32, 3) and im.min() >= 0 and im.max() <= 1
        assert im.max() > 0.2  # the blobs are in view
