"""Versioned binary checkpoints of a TrainState.

Layout (little-endian)::

    b"HBGS"  u32 version  u64 manifest_bytes  manifest (UTF-8 JSON)  tensor data

The manifest carries scalar metadata and, per tensor, its name, shape and
byte offset into the data block. Every tensor is stored as float64, so a
round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .anchors import AnchorSet
from .errors import CheckpointError
from .gaussian_decode import DecoderBank
from .geometry import Intrinsics
from .image_features import FeatureNets, Mlp
from .state import TrainState

MAGIC = b"HBGS"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _mlp_dims(net: Mlp):
    return [net.in_dim] + [W.shape[0] for W, _ in net.layers]


def _skeleton_mlp(dims):
    return Mlp([(np.zeros((o, i)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])])


def save_state(state: TrainState, path):
    tensors = [(f"param.{n}", p) for n, p in state.named_parameters()]
    for name, (m, v, t) in sorted(state.moments.items()):
        tensors.append((f"moment.m.{name}", m))
        tensors.append((f"moment.v.{name}", v))
    tensors.append(("anchors.positions", state.anchors.positions))
    tensors.append(("anchors.disabled", state.disabled.to(torch.float64)))
    tensors.append(("anchors.low_opacity_steps", state.low_opacity_steps.to(torch.float64)))
    for i, im in enumerate(state.images):
        tensors.append((f"image.{i}", im))

    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f8")
        blob = arr.tobytes()
        entries.append(dict(name=name, shape=list(arr.shape), offset=offset, nbytes=len(blob)))
        blobs.append(blob)
        offset += len(blob)

    nets = state.feature_nets
    manifest = dict(
        step=state.step,
        extent=state.extent,
        voxel_scale=state.anchors.voxel_scale,
        use_image_features=state.use_image_features,
        alpha_cull=state.alpha_cull,
        background=list(state.background),
        frozen=sorted(state.frozen),
        moment_steps={k: t for k, (_, _, t) in state.moments.items()},
        intrinsics=[c.to_dict() for c in state.intrinsics],
        feature_nets=dict(color=_mlp_dims(nets.color), direction=_mlp_dims(nets.direction),
                          fuse=_mlp_dims(nets.fuse), color_sees_ray=nets.color_sees_ray),
        fusion=_mlp_dims(state.fusion_net),
        decoders=dict(k=state.decoders.k, offset_scale=state.decoders.offset_scale,
                      heads={h: _mlp_dims(getattr(state.decoders, h)) for h in DecoderBank.HEADS}),
        tensors=entries,
        data_bytes=offset,
    )
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError("corrupt checkpoint")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("corrupt checkpoint")
    if version != VERSION:
        raise CheckpointError("incompatible checkpoint version")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint") from None
    data = raw[_HEADER.size + mlen:]
    if len(data) != manifest["data_bytes"]:
        raise CheckpointError("corrupt checkpoint")

    tensors = {}
    for e in manifest["tensors"]:
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        tensors[e["name"]] = torch.from_numpy(arr)

    fn = manifest["feature_nets"]
    nets = FeatureNets(_skeleton_mlp(fn["color"]), _skeleton_mlp(fn["direction"]), _skeleton_mlp(fn["fuse"]),
                       fn["color_sees_ray"])
    dec = manifest["decoders"]
    bank = DecoderBank(*(_skeleton_mlp(dec["heads"][h]) for h in DecoderBank.HEADS),
                       k=dec["k"], offset_scale=dec["offset_scale"])
    n_images = sum(1 for k in tensors if k.startswith("image."))
    state = TrainState(
        anchors=AnchorSet(tensors["anchors.positions"], tensors["param.anchor_features"], manifest["voxel_scale"]),
        feature_nets=nets,
        fusion_net=_skeleton_mlp(manifest["fusion"]),
        decoders=bank,
        poses=tensors["param.poses"],
        intrinsics=[Intrinsics(**c) for c in manifest["intrinsics"]],
        images=[tensors[f"image.{i}"] for i in range(n_images)],
        extent=manifest["extent"],
        use_image_features=manifest["use_image_features"],
        alpha_cull=manifest["alpha_cull"],
        background=tuple(manifest["background"]),
        step=manifest["step"],
        frozen=set(manifest["frozen"]),
        disabled=tensors["anchors.disabled"].to(torch.bool),
        low_opacity_steps=tensors["anchors.low_opacity_steps"].to(torch.long),
    )
    state.set_parameters({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    for name, t in manifest["moment_steps"].items():
        state.moments[name] = (tensors[f"moment.m.{name}"], tensors[f"moment.v.{name}"], t)
    return state
