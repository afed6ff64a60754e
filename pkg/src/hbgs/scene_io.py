"""Scene bundles: COLMAP text sparse models, PNG rasters and scene directories.

A scene directory on disk looks like::

    scene/
      sparse/cameras.txt, images.txt, points3D.txt
      images/<name>.png
      split.json          optional {"test": [names]}

COLMAP stores world-to-camera poses; they are converted to camera-to-world
once, at parse time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import ColmapError
from .geometry import CameraPose, Intrinsics, as_tensor, quat_conjugate, quat_to_rotmat

COLMAP_FILES = ("cameras.txt", "images.txt", "points3D.txt")


@dataclass
class SceneBundle:
    intrinsics: list  # Intrinsics per view
    poses: list  # CameraPose (camera-to-world) per view
    names: list  # image names / ids
    images: list  # (H, W, 3) float arrays in [0, 1]; may be empty when not loaded
    points: np.ndarray  # (P, 3)
    test: list = field(default_factory=list)  # per-view flag; True = held out
    point_colors: np.ndarray | None = None

    def __len__(self):
        return len(self.poses)

    def train_indices(self):
        return [i for i in range(len(self)) if not self.test[i]]

    def test_indices(self):
        return [i for i in range(len(self)) if self.test[i]]

    def with_poses(self, poses) -> "SceneBundle":
        return SceneBundle(list(self.intrinsics), list(poses), list(self.names), list(self.images),
                           self.points, list(self.test), self.point_colors)


def split_every(n_views: int, every: int = 8) -> list:
    """Held-out flags: every ``every``-th view (0, every, 2*every, ...) is a test view."""
    return [every > 0 and i % every == 0 for i in range(n_views)]


# COLMAP text ---------------------------------------------------------------

def _lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            yield lineno, raw.rstrip("\n")


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ColmapError(f"{os.path.basename(path)}:{lineno}: malformed line") from None


def _read_cameras(path):
    cams = {}
    for lineno, line in _lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 5:
            raise ColmapError(f"cameras.txt:{lineno}: malformed line")
        model = tok[1]
        try:
            cam_id, width, height = int(tok[0]), int(tok[2]), int(tok[3])
        except ValueError:
            raise ColmapError(f"cameras.txt:{lineno}: malformed line") from None
        params = _floats(tok[4:], path, lineno)
        if model == "SIMPLE_PINHOLE" and len(params) == 3:
            fx = fy = params[0]
            cx, cy = params[1:3]
        elif model == "PINHOLE" and len(params) == 4:
            fx, fy, cx, cy = params
        elif model in ("SIMPLE_PINHOLE", "PINHOLE"):
            raise ColmapError(f"cameras.txt:{lineno}: malformed line")
        else:
            raise ColmapError(f"unsupported camera model {model}")
        cams[cam_id] = Intrinsics(fx, fy, cx, cy, width, height)
    return cams


def _read_images(path):
    out = []
    expect_points = False
    for lineno, line in _lines(path):
        if line.startswith("#"):
            continue
        if expect_points:
            # the POINTS2D line follows every image line and may be blank
            expect_points = False
            continue
        s = line.strip()
        if not s:
            continue
        tok = s.split()
        if len(tok) < 10:
            raise ColmapError(f"images.txt:{lineno}: malformed line")
        vals = _floats(tok[1:8], path, lineno)
        try:
            image_id, cam_id = int(tok[0]), int(tok[8])
        except ValueError:
            raise ColmapError(f"images.txt:{lineno}: malformed line") from None
        out.append((image_id, np.array(vals[:4]), np.array(vals[4:7]), cam_id, " ".join(tok[9:])))
        expect_points = True
    return out


def _read_points(path):
    xyz, rgb = [], []
    for lineno, line in _lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 8:
            raise ColmapError(f"points3D.txt:{lineno}: malformed line")
        vals = _floats(tok[1:7], path, lineno)
        xyz.append(vals[:3])
        rgb.append(vals[3:6])
    return np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(rgb, dtype=np.float64).reshape(-1, 3) / 255.0


def colmap_to_pose(qvec, tvec) -> CameraPose:
    """Camera-to-world pose from COLMAP's world-to-camera (q, t)."""
    q = torch.as_tensor(np.asarray(qvec, dtype=np.float64))
    q = q / torch.linalg.vector_norm(q)
    R = quat_to_rotmat(q)
    C = -R.T @ torch.as_tensor(np.asarray(tvec, dtype=np.float64))
    return CameraPose(quat_conjugate(q), C).normalized()


def pose_to_colmap(pose: CameraPose):
    """Inverse of :func:`colmap_to_pose`: (qvec, tvec) as numpy arrays."""
    pose = pose.normalized()
    q = quat_conjugate(pose.rotation)
    t = -(quat_to_rotmat(q) @ pose.translation)
    return np.asarray(q.detach()), np.asarray(t.detach())


def parse_colmap_text(dir_path, image_dir=None) -> SceneBundle:
    """Read a COLMAP text model; rasters are loaded when ``image_dir`` exists."""
    for name in COLMAP_FILES:
        if not os.path.isfile(os.path.join(dir_path, name)):
            raise ColmapError(f"missing colmap file {name}")
    cams = _read_cameras(os.path.join(dir_path, "cameras.txt"))
    entries = _read_images(os.path.join(dir_path, "images.txt"))
    points, colors = _read_points(os.path.join(dir_path, "points3D.txt"))
    intrinsics, poses, names, images = [], [], [], []
    for image_id, q, t, cam_id, name in sorted(entries, key=lambda e: e[0]):
        if cam_id not in cams:
            raise ColmapError(f"image {image_id} references unknown camera {cam_id}")
        intr = cams[cam_id]
        intrinsics.append(intr)
        poses.append(colmap_to_pose(q, t))
        names.append(name)
        if image_dir is not None and os.path.isdir(image_dir):
            im = read_png(os.path.join(image_dir, name))
            if im.shape[:2] != (intr.height, intr.width):
                raise ColmapError(f"image {name} is {im.shape[1]}x{im.shape[0]}, camera declares {intr.width}x{intr.height}")
            images.append(im)
    return SceneBundle(intrinsics, poses, names, images, points, [False] * len(poses), colors)


def write_colmap_text(bundle: SceneBundle, dir_path):
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "cameras.txt"), "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for i, c in enumerate(bundle.intrinsics, 1):
            fh.write(f"{i} PINHOLE {c.width} {c.height} {float(c.fx)!r} {float(c.fy)!r} {float(c.cx)!r} {float(c.cy)!r}\n")
    with open(os.path.join(dir_path, "images.txt"), "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, (pose, name) in enumerate(zip(bundle.poses, bundle.names), 1):
            q, t = pose_to_colmap(pose)
            vals = " ".join(repr(float(x)) for x in (*q, *t))
            fh.write(f"{i} {vals} {i} {name}\n\n")
    colors = bundle.point_colors if bundle.point_colors is not None else np.ones_like(bundle.points)
    with open(os.path.join(dir_path, "points3D.txt"), "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        for i, (p, c) in enumerate(zip(bundle.points, colors), 1):
            rgb = " ".join(str(int(round(255 * float(x)))) for x in c)
            fh.write(f"{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {rgb} 0\n")


# PNG -------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_png(path, image):
    arr = np.asarray(as_tensor(image).detach(), dtype=np.float64)
    arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# scene directories -------------------------------------------------------------

def write_scene(bundle: SceneBundle, scene_dir):
    os.makedirs(os.path.join(scene_dir, "images"), exist_ok=True)
    write_colmap_text(bundle, os.path.join(scene_dir, "sparse"))
    for name, im in zip(bundle.names, bundle.images):
        write_png(os.path.join(scene_dir, "images", name), im)
    with open(os.path.join(scene_dir, "split.json"), "w") as fh:
        json.dump({"test": [n for n, t in zip(bundle.names, bundle.test) if t]}, fh, indent=2)


def load_scene(scene_dir, test_every: int = 8) -> SceneBundle:
    """Load a scene directory; without split.json every ``test_every``-th view is held out."""
    bundle = parse_colmap_text(os.path.join(scene_dir, "sparse"), os.path.join(scene_dir, "images"))
    split_path = os.path.join(scene_dir, "split.json")
    if os.path.isfile(split_path):
        with open(split_path) as fh:
            held = set(json.load(fh)["test"])
        bundle.test = [n in held for n in bundle.names]
    else:
        bundle.test = split_every(len(bundle), test_every)
    return bundle
