"""Clip networks built from plain-dict architecture descriptors.

A descriptor is JSON-serialisable::

    {"name": "teacher", "input_shape": [3, L, H, W], "num_classes": C,
     "layers": [{"kind": "conv3d", ...}, ...],
     "heads": {"class": {"kind": "dense", "in": 128, "out": C}}}

Students add a ``"confidence"`` head with one output. The same descriptor
drives module construction, analytic profiling and checkpoint validation.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .arrayio import atomic_write_bytes, read_array, write_array
from .exceptions import CheckpointError, ConfigError, FormatError

CHECKPOINT_VERSION = 1
LAYER_KINDS = ("conv3d", "batchnorm3d", "relu", "maxpool3d", "avgpool3d", "global_avgpool", "dense")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"expected an int or a 3-sequence, got {v!r}")
    return t


def conv(cin: int, cout: int, kernel=3, stride=1, padding=1, groups: int = 1) -> dict:
    return {"kind": "conv3d", "in": cin, "out": cout, "kernel": list(_triple(kernel)),
            "stride": list(_triple(stride)), "padding": list(_triple(padding)), "groups": groups}


def pool(kernel, kind: str = "maxpool3d") -> dict:
    return {"kind": kind, "kernel": list(_triple(kernel))}


def reference_teacher(num_classes: int, clip_length: int = 8, frame_size: int = 32) -> dict:
    """Four 3-D conv blocks (16, 32, 64, 128 channels), pooled, then a dense head."""
    layers = []
    widths = [3, 16, 32, 64, 128]
    pools = [(1, 2, 2), (2, 2, 2), (2, 2, 2), None]
    for cin, cout, p in zip(widths[:-1], widths[1:], pools):
        layers += [conv(cin, cout), {"kind": "batchnorm3d", "channels": cout}, {"kind": "relu"}]
        if p is not None:
            layers.append(pool(p))
    layers.append({"kind": "global_avgpool"})
    return {
        "name": "reference-teacher",
        "input_shape": [3, clip_length, frame_size, frame_size],
        "num_classes": num_classes,
        "layers": layers,
        "heads": {"class": {"kind": "dense", "in": 128, "out": num_classes}},
    }


def reference_student(num_classes: int, clip_length: int = 8, frame_size: int = 32) -> dict:
    """Two depthwise-separable 3-D blocks (8, 16 channels) with class and confidence heads."""
    layers = [
        conv(3, 8, kernel=1, padding=0), conv(8, 8, groups=8),
        {"kind": "batchnorm3d", "channels": 8}, {"kind": "relu"}, pool(2),
        conv(8, 8, groups=8), conv(8, 16, kernel=1, padding=0),
        {"kind": "batchnorm3d", "channels": 16}, {"kind": "relu"},
        {"kind": "global_avgpool"},
    ]
    return {
        "name": "reference-student",
        "input_shape": [3, clip_length, frame_size, frame_size],
        "num_classes": num_classes,
        "layers": layers,
        "heads": {
            "class": {"kind": "dense", "in": 16, "out": num_classes},
            "confidence": {"kind": "dense", "in": 16, "out": 1},
        },
    }


# ---------------------------------------------------------------------------
# Analytic profile


@dataclass(frozen=True)
class ModelProfile:
    flops_per_clip: int
    param_count: int


def _out_len(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def profile(descriptor: dict) -> ModelProfile:
    """Exact FLOPs (2 per multiply-accumulate) and parameter count.

    Conv: 2 * out_elements * kernel_volume * in_channels / groups.
    Dense: 2 * in * out. Batch norm: 2 per element. Pooling: one op per
    window element, global pooling one per input element. ReLU: one per
    element. Biases are counted as parameters, not FLOPs.
    """
    layers = descriptor.get("layers", [])
    heads = descriptor.get("heads", {})
    if not layers and not heads:
        raise ConfigError("empty architecture descriptor")
    shape = tuple(descriptor.get("input_shape", ()))  # (C, T, H, W) or (features,)
    flops = params = 0
    for layer in layers:
        f, p, shape = _layer_cost(layer, shape)
        flops += f
        params += p
    for head in heads.values():
        f, p, _ = _layer_cost(head, shape)
        flops += f
        params += p
    return ModelProfile(int(flops), int(params))


def _layer_cost(layer: dict, shape: tuple) -> tuple[int, int, tuple]:
    kind = layer.get("kind")
    if kind == "conv3d":
        cin, cout, g = layer["in"], layer["out"], layer.get("groups", 1)
        k, s, p = _triple(layer["kernel"]), _triple(layer.get("stride", 1)), _triple(layer.get("padding", 0))
        if shape[0] != cin:
            raise ConfigError(f"conv3d expects {cin} input channels, got {shape[0]}")
        spatial = tuple(_out_len(n, kk, ss, pp) for n, kk, ss, pp in zip(shape[1:], k, s, p))
        out_elems = cout * math.prod(spatial)
        kvol = math.prod(k)
        return 2 * out_elems * kvol * (cin // g), cout * (cin // g) * kvol + cout, (cout, *spatial)
    if kind == "batchnorm3d":
        if shape[0] != layer["channels"]:
            raise ConfigError("batchnorm3d channel mismatch")
        return 2 * math.prod(shape), 2 * layer["channels"], shape
    if kind == "relu":
        return math.prod(shape), 0, shape
    if kind in ("maxpool3d", "avgpool3d"):
        k = _triple(layer["kernel"])
        spatial = tuple(n // kk for n, kk in zip(shape[1:], k))
        out = (shape[0], *spatial)
        return math.prod(out) * math.prod(k), 0, out
    if kind == "global_avgpool":
        return math.prod(shape), 0, (shape[0],)
    if kind == "dense":
        if math.prod(shape) != layer["in"]:
            raise ConfigError(f"dense expects {layer['in']} inputs, got {math.prod(shape)}")
        return 2 * layer["in"] * layer["out"], layer["in"] * layer["out"] + layer["out"], (layer["out"],)
    raise ConfigError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Modules


def _build_layer(layer: dict) -> nn.Module:
    kind = layer.get("kind")
    if kind == "conv3d":
        return nn.Conv3d(layer["in"], layer["out"], _triple(layer["kernel"]),
                         stride=_triple(layer.get("stride", 1)), padding=_triple(layer.get("padding", 0)),
                         groups=layer.get("groups", 1))
    if kind == "batchnorm3d":
        return nn.BatchNorm3d(layer["channels"])
    if kind == "relu":
        return nn.ReLU()
    if kind == "maxpool3d":
        return nn.MaxPool3d(_triple(layer["kernel"]))
    if kind == "avgpool3d":
        return nn.AvgPool3d(_triple(layer["kernel"]))
    if kind == "global_avgpool":
        return nn.Sequential(nn.AdaptiveAvgPool3d(1), nn.Flatten())
    if kind == "dense":
        return nn.Linear(layer["in"], layer["out"])
    raise ConfigError(f"unknown layer kind {kind!r}")


class ClipNet(nn.Module):
    """Shared body plus named dense heads. Input clips are (B, L, 3, H, W)."""

    def __init__(self, descriptor: dict):
        super().__init__()
        profile(descriptor)  # validates shapes and layer kinds
        self.descriptor = copy.deepcopy(descriptor)
        self.body = nn.Sequential(*[_build_layer(layer) for layer in descriptor["layers"]])
        self.heads = nn.ModuleDict({name: _build_layer(h) for name, h in descriptor["heads"].items()})

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.descriptor["input_shape"])

    def embed(self, clips: torch.Tensor) -> torch.Tensor:
        expected = self.input_shape
        if clips.ndim != 5 or (clips.shape[2], clips.shape[1], *clips.shape[3:]) != expected:
            raise ValueError(
                f"clip shape {tuple(clips.shape[1:])} does not match architecture "
                f"(L, 3, H, W) = {(expected[1], expected[0], *expected[2:])}"
            )
        return self.body(clips.transpose(1, 2))

    def forward(self, clips: torch.Tensor) -> dict[str, torch.Tensor]:
        h = self.embed(clips)
        return {name: head(h) for name, head in self.heads.items()}


class StudentOutput(NamedTuple):
    class_logits: torch.Tensor  # (B, C)
    confidence_logit: torch.Tensor  # (B,)


def build(descriptor: dict, seed: int | None = None) -> ClipNet:
    if seed is not None:
        torch.manual_seed(seed)
    return ClipNet(descriptor)


def _as_batch(net: ClipNet, clips) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(clips) if not torch.is_tensor(clips) else clips, dtype=dtype)
    if x.ndim == 4:
        x = x[None]
    return x


def teacher_forward(net: ClipNet, clips) -> torch.Tensor:
    """Class logits for a clip (L, 3, H, W) or a batch (B, L, 3, H, W). Inference mode."""
    net.eval()
    with torch.no_grad():
        return net(_as_batch(net, clips))["class"]


def student_forward(net: ClipNet, clips) -> StudentOutput:
    if "confidence" not in net.heads:
        raise ConfigError(f"{net.descriptor['name']} has no confidence head")
    net.eval()
    with torch.no_grad():
        out = net(_as_batch(net, clips))
    return StudentOutput(out["class"], out["confidence"][:, 0])


def confidence_parameters(net: ClipNet) -> list[nn.Parameter]:
    return list(net.heads["confidence"].parameters()) if "confidence" in net.heads else []


def main_parameters(net: ClipNet) -> list[nn.Parameter]:
    conf = {id(p) for p in confidence_parameters(net)}
    return [p for p in net.parameters() if id(p) not in conf]


# ---------------------------------------------------------------------------
# Checkpoints: one JSON metadata line, then CDAR arrays in declaration order.


@dataclass
class ParameterCheckpoint:
    descriptor: dict
    arrays: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION
    seed: int | None = None

    @classmethod
    def from_net(cls, net: ClipNet, seed: int | None = None) -> "ParameterCheckpoint":
        state = net.state_dict()
        arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}
        return cls(copy.deepcopy(net.descriptor), arrays, CHECKPOINT_VERSION, seed)

    def to_net(self, descriptor: dict | None = None) -> ClipNet:
        if descriptor is not None and _canonical(descriptor) != _canonical(self.descriptor):
            raise CheckpointError(
                f"descriptor mismatch: checkpoint holds {self.descriptor.get('name')!r}, "
                f"requested {descriptor.get('name')!r}"
            )
        net = ClipNet(self.descriptor)
        self.load_into(net)
        return net

    def load_into(self, net: ClipNet) -> None:
        if _canonical(net.descriptor) != _canonical(self.descriptor):
            raise CheckpointError(
                f"descriptor mismatch: checkpoint holds {self.descriptor.get('name')!r}, "
                f"model is {net.descriptor.get('name')!r}"
            )
        state = net.state_dict()
        new_state = {}
        for k, ref in state.items():
            if k not in self.arrays:
                raise CheckpointError(f"checkpoint lacks parameter {k}")
            new_state[k] = torch.as_tensor(self.arrays[k]).to(ref.dtype).reshape(ref.shape)
        net.load_state_dict(new_state)

    def to_bytes(self) -> bytes:
        meta = {
            "format_version": self.version,
            "architecture": self.descriptor,
            "seed": self.seed,
            "arrays": [[k, list(v.shape)] for k, v in self.arrays.items()],
        }
        buf = io.BytesIO()
        buf.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
        for v in self.arrays.values():
            write_array(buf, np.asarray(v, dtype=np.float32))
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _canonical(descriptor: dict) -> str:
    return json.dumps(descriptor, sort_keys=True)


def save_checkpoint(ckpt: ParameterCheckpoint | ClipNet, path: str | os.PathLike, seed: int | None = None) -> Path:
    if isinstance(ckpt, ClipNet):
        ckpt = ParameterCheckpoint.from_net(ckpt, seed)
    path = Path(path)
    atomic_write_bytes(path, ckpt.to_bytes())
    return path


def load_checkpoint(path: str | os.PathLike, descriptor: dict | None = None) -> ParameterCheckpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            meta = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed checkpoint header in {path}") from exc
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {meta.get('format_version')} is not supported")
        arrays = {}
        for name, shape in meta["arrays"]:
            arr = read_array(fh, name=f"{path}:{name}")
            if list(arr.shape) != shape:
                raise FormatError(f"{path}:{name}: shape {arr.shape} disagrees with header {shape}")
            arrays[name] = arr
    ckpt = ParameterCheckpoint(meta["architecture"], arrays, meta["format_version"], meta.get("seed"))
    if descriptor is not None and _canonical(descriptor) != _canonical(ckpt.descriptor):
        raise CheckpointError(
            f"descriptor mismatch: {path} holds {ckpt.descriptor.get('name')!r}, "
            f"expected {descriptor.get('name')!r}"
        )
    return ckpt
