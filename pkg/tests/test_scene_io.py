import os

import numpy as np
import pytest
import torch

from hbgs.errors import ColmapError
from hbgs.geometry import Intrinsics, axis_angle_to_quat, project, quat_to_rotmat
from hbgs.scene_io import (SceneBundle, colmap_to_pose, load_scene, parse_colmap_text, pose_to_colmap, read_png,
                           split_every, write_png, write_scene)
from hbgs.synthetic import SyntheticSceneSpec, generate_synthetic_scene

from conftest import random_pose

CAMERAS = "# comment\n1 SIMPLE_PINHOLE 100 100 100 50 50\n"
IMAGES = "# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n1 1 0 0 0 0 0 0 1 a.png\n\n"
POINTS = "1 0 0 5 255 0 0 0.1\n"


def write_model(d, cameras=CAMERAS, images=IMAGES, points=POINTS):
    os.makedirs(d, exist_ok=True)
    for name, text in (("cameras.txt", cameras), ("images.txt", images), ("points3D.txt", points)):
        if text is not None:
            with open(os.path.join(d, name), "w") as fh:
                fh.write(text)


def test_minimal_fixture(tmp_path):
    write_model(tmp_path)
    b = parse_colmap_text(tmp_path)
    assert len(b) == 1 and b.points.tolist() == [[0.0, 0.0, 5.0]]
    assert b.intrinsics[0] == Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    assert torch.equal(b.poses[0].translation, torch.zeros(3, dtype=torch.float64))
    assert b.point_colors.tolist() == [[1.0, 0.0, 0.0]]


def test_points2d_line_with_observations_is_skipped(tmp_path):
    write_model(tmp_path, images="1 1 0 0 0 0 0 0 1 a.png\n10.0 20.0 1 30.0 40.0 -1\n2 1 0 0 0 1 0 0 1 b.png\n\n")
    assert parse_colmap_text(tmp_path).names == ["a.png", "b.png"]


def test_colmap_convention_reprojects_fixture_point(rng):
    intr = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    for _ in range(20):
        q = axis_angle_to_quat(rng.normal(size=3), float(rng.uniform(0, 3)))
        R = quat_to_rotmat(q)
        t = torch.from_numpy(rng.normal(size=3))
        p_cam = torch.tensor([0.3, -0.2, 4.0], dtype=torch.float64)
        x = R.T @ (p_cam - t)  # COLMAP: p_cam = R x + t
        u, v, z = project(intr, colmap_to_pose(q.numpy(), t.numpy()), x)
        assert abs(float(u) - (100 * 0.3 / 4 + 50)) < 1e-9 and abs(float(z) - 4.0) < 1e-9


def test_pose_colmap_round_trip(rng):
    for _ in range(20):
        pose = random_pose(rng).normalized()
        back = colmap_to_pose(*pose_to_colmap(pose))
        assert torch.allclose(back.as_vector(), pose.as_vector(), atol=1e-12)


@pytest.mark.parametrize("missing", ["cameras.txt", "images.txt", "points3D.txt"])
def test_missing_file(tmp_path, missing):
    kw = {"cameras": CAMERAS, "images": IMAGES, "points": POINTS}
    kw[{"cameras.txt": "cameras", "images.txt": "images", "points3D.txt": "points"}[missing]] = None
    write_model(tmp_path, **kw)
    with pytest.raises(ColmapError, match=f"missing colmap file {missing}"):
        parse_colmap_text(tmp_path)


def test_malformed_and_unsupported(tmp_path):
    write_model(tmp_path / "a", points="1 0 zero 5 255 0 0 0\n")
    with pytest.raises(ColmapError, match=r"points3D.txt:1: malformed line"):
        parse_colmap_text(tmp_path / "a")
    write_model(tmp_path / "b", cameras="1 OPENCV 10 10 1 1 5 5 0 0 0 0\n")
    with pytest.raises(ColmapError, match="unsupported camera model OPENCV"):
        parse_colmap_text(tmp_path / "b")


def test_png_round_trip(tmp_path, rng):
    im = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    write_png(tmp_path / "x.png", im)
    assert np.array_equal(read_png(tmp_path / "x.png"), im)


def test_split_rule():
    assert split_every(12, 8) == [i in (0, 8) for i in range(12)]


def test_scene_round_trip(tmp_path):
    gt, _ = generate_synthetic_scene(SyntheticSceneSpec(n_points=20, n_cameras=3, width=16, height=16))
    write_scene(gt, tmp_path)
    b = load_scene(tmp_path)
    assert b.names == gt.names and b.test == gt.test
    assert np.array_equal(b.points, gt.points)
    for p, q in zip(b.poses, gt.poses):
        assert torch.allclose(p.as_vector(), q.as_vector(), atol=1e-12)
    for a, c in zip(b.images, gt.images):
        assert np.abs(a - c).max() <= 0.5 / 255 + 1e-12
