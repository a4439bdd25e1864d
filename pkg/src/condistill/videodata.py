"""Synthetic moving-shape video corpus, clip segmentation and on-disk formats.

Each video shows one soft-edged disk drifting across a toroidal frame. The
class is the disk's motion pattern (direction x speed). Clip-aligned blocks
are corrupted independently: the true disk fades, static grey rectangles
occlude the frame, a decoy disk moves with another class's motion and heavy
Gaussian noise is added. A corrupted clip therefore carries little evidence
for the true class and some evidence for a wrong one.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .arrayio import load_array, save_array
from .exceptions import ConfigError, FormatError, ManifestError

MANIFEST_NAME = "manifest.jsonl"
FORMAT_VERSION = 1
MAX_DIRECTIONS = 8

# Corruption appearance. Severity scales how much the true disk fades and how
# visible the decoy is; the noise level is independent of severity.
NOISE_SIGMA = 0.3
SEVERITY_RANGE = (0.5, 1.0)
OCCLUDER_SIDE = (0.3, 0.6)


@dataclass
class Video:
    id: str
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    label: int
    corrupted_frame_mask: np.ndarray  # (T,) bool

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must have shape (T, 3, H, W), got {self.frames.shape}")
        if len(self.frames) < 1:
            raise ValueError("a video needs at least one frame")
        if len(self.corrupted_frame_mask) != len(self.frames):
            raise ValueError("corrupted_frame_mask length must equal the frame count")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class Clip:
    volume: np.ndarray  # (L, 3, H, W)
    source_video: str
    index: int
    corrupted: bool
    padded_frames: int


@dataclass
class ManifestEntry:
    id: str
    path: str  # relative to the corpus directory
    label: int
    clip_corrupted: list[bool]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    clip_length: int
    generator_seed: int
    params: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def video_path(self, entry: ManifestEntry) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory; load it with load_corpus")
        return self.root / entry.path

    def load_video(self, entry: ManifestEntry | int) -> Video:
        if isinstance(entry, (int, np.integer)):
            entry = self.entries[int(entry)]
        path = self.video_path(entry)
        if not path.exists():
            raise ManifestError(f"missing video file {path}")
        raw = load_array(path)
        if raw.ndim != 4 or raw.shape[1] != 3:
            raise FormatError(f"{path}: expected (T, 3, H, W) array, got shape {raw.shape}")
        n_clips = math.ceil(raw.shape[0] / self.clip_length)
        if n_clips != len(entry.clip_corrupted):
            raise ManifestError(
                f"{path}: {n_clips} clips on disk but manifest lists {len(entry.clip_corrupted)}"
            )
        mask = np.repeat(np.asarray(entry.clip_corrupted, dtype=bool), self.clip_length)[: raw.shape[0]]
        frames = raw.astype(np.float32) / 255.0 if raw.dtype == np.uint8 else raw
        return Video(entry.id, frames, entry.label, mask)

    def iter_videos(self) -> Iterator[Video]:
        for entry in self.entries:
            yield self.load_video(entry)


# ---------------------------------------------------------------------------
# Generation


def class_velocity(label: int, num_classes: int, frame_size: int) -> tuple[float, float]:
    """Velocity in pixels/frame for a class.

    Up to eight classes use evenly spaced directions at one speed. Larger class
    counts use eight directions and add a faster speed tier (at most 16 classes).
    """
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    n_dirs = num_classes if num_classes <= MAX_DIRECTIONS else MAX_DIRECTIONS
    direction, tier = label % n_dirs, label // n_dirs
    speed = frame_size / 16.0 * (1.0 + tier)
    theta = 2.0 * math.pi * direction / n_dirs
    return speed * math.cos(theta), speed * math.sin(theta)


def _disk_alpha(frame_size: int, cx: np.ndarray, cy: np.ndarray, radius: float) -> np.ndarray:
    """Soft disk coverage on a torus, one (H, W) map per centre."""
    coords = np.arange(frame_size, dtype=np.float64) + 0.5
    dx = np.abs(coords[None, None, :] - cx[:, None, None])
    dy = np.abs(coords[None, :, None] - cy[:, None, None])
    dx = np.minimum(dx, frame_size - dx)
    dy = np.minimum(dy, frame_size - dy)
    dist = np.sqrt(dx * dx + dy * dy)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _trajectory(rng: np.random.Generator, n: int, velocity, frame_size: int, t0: int = 0):
    x0, y0 = rng.uniform(0, frame_size, size=2)
    t = np.arange(t0, t0 + n, dtype=np.float64)
    return (x0 + velocity[0] * t) % frame_size, (y0 + velocity[1] * t) % frame_size


def render_video(
    rng: np.random.Generator,
    label: int,
    num_classes: int,
    frames_per_video: int,
    frame_size: int,
    clip_length: int,
    corrupt_prob: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one video as uint8 frames (T, 3, S, S) plus the per-clip corruption flags."""
    S, T = frame_size, frames_per_video
    n_clips = math.ceil(T / clip_length)
    radius = 0.18 * S

    jitter = rng.uniform(-0.1, 0.1)
    vx, vy = class_velocity(label, num_classes, S)
    c, s = math.cos(jitter), math.sin(jitter)
    velocity = (c * vx - s * vy, s * vx + c * vy)

    background = rng.uniform(0.1, 0.35, size=(3, 1, 1)) + 0.03 * rng.standard_normal((3, S, S))
    color = rng.uniform(0.7, 1.0, size=(3, 1, 1))
    cx, cy = _trajectory(rng, T, velocity, S)
    alpha = _disk_alpha(S, cx, cy, radius)[:, None]  # (T, 1, S, S)

    corrupted = rng.random(n_clips) < corrupt_prob
    decoy = (label + 1 + int(rng.integers(num_classes - 1))) % num_classes
    decoy_velocity = class_velocity(decoy, num_classes, S)

    frames = background[None] * (1 - alpha) + color[None] * alpha
    for b in np.flatnonzero(corrupted):
        lo, hi = b * clip_length, min(T, (b + 1) * clip_length)
        n = hi - lo
        severity = rng.uniform(*SEVERITY_RANGE)
        a_true = alpha[lo:hi] * (1.0 - severity)
        block = background[None] * (1 - a_true) + color[None] * a_true
        for _ in range(int(rng.integers(1, 3))):
            w, h = (rng.uniform(*OCCLUDER_SIDE, size=2) * S).astype(int) + 1
            x, y = rng.integers(0, S - w + 1), rng.integers(0, S - h + 1)
            block[:, :, y : y + h, x : x + w] = rng.uniform(0.2, 0.6)
        dcolor = rng.uniform(0.7, 1.0, size=(3, 1, 1))
        dx, dy = _trajectory(rng, n, decoy_velocity, S)
        a_decoy = _disk_alpha(S, dx, dy, radius)[:, None] * severity
        block = block * (1 - a_decoy) + dcolor[None] * a_decoy
        block = block + NOISE_SIGMA * rng.standard_normal(block.shape)
        frames[lo:hi] = block

    pixels = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, corrupted


def video_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def generate_corpus(
    directory: str | os.PathLike,
    num_videos: int,
    num_classes: int,
    frames_per_video: int,
    frame_size: int = 32,
    corrupt_prob: float = 0.3,
    seed: int = 0,
    clip_length: int = 8,
) -> DatasetManifest:
    """Generate and write a corpus; returns its manifest.

    Output depends only on the arguments. Labels cycle through the classes so
    the corpus is balanced.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if num_classes > 2 * MAX_DIRECTIONS:
        raise ConfigError(f"at most {2 * MAX_DIRECTIONS} classes are supported")
    if not 0.0 <= corrupt_prob < 1.0:
        raise ConfigError("corrupt_prob must lie in [0, 1)")
    if frame_size < 16:
        raise ConfigError("frame_size must be >= 16")
    if num_videos < 1:
        raise ConfigError("num_videos must be >= 1")
    if clip_length < 1:
        raise ConfigError("clip_length must be >= 1")
    if frames_per_video < clip_length:
        raise ConfigError(f"frames_per_video={frames_per_video} is shorter than one clip ({clip_length})")

    root = Path(directory)
    try:
        (root / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise ConfigError(f"output directory {root} is not writable")

    entries = []
    for i in range(num_videos):
        label = i % num_classes
        rng = np.random.default_rng(video_seed(seed, i))
        pixels, corrupted = render_video(
            rng, label, num_classes, frames_per_video, frame_size, clip_length, corrupt_prob
        )
        rel = f"videos/{i:06d}.cdar"
        save_array(root / rel, pixels)
        entries.append(ManifestEntry(f"v{i:06d}", rel, label, [bool(c) for c in corrupted]))

    params = dict(
        num_videos=num_videos,
        frames_per_video=frames_per_video,
        frame_size=frame_size,
        corrupt_prob=corrupt_prob,
    )
    manifest = DatasetManifest(entries, num_classes, clip_length, seed, params, root=root)
    write_manifest(manifest, root)
    return manifest


# ---------------------------------------------------------------------------
# Segmentation


def segment(video: Video, clip_length: int) -> list[Clip]:
    """Split a video into ceil(T / L) consecutive clips.

    The last clip is padded by repeating its final real frame.
    """
    if clip_length < 1:
        raise ValueError("clip_length must be >= 1")
    T = video.num_frames
    n = math.ceil(T / clip_length)
    clips = []
    for i in range(n):
        lo, hi = i * clip_length, min(T, (i + 1) * clip_length)
        volume = video.frames[lo:hi]
        pad = clip_length - (hi - lo)
        if pad:
            volume = np.concatenate([volume, np.repeat(volume[-1:], pad, axis=0)], axis=0)
        clips.append(
            Clip(
                volume=volume,
                source_video=video.id,
                index=i,
                corrupted=bool(video.corrupted_frame_mask[lo:hi].any()),
                padded_frames=pad,
            )
        )
    return clips


def stack_clips(clips: Sequence[Clip]) -> np.ndarray:
    return np.stack([c.volume for c in clips]).astype(np.float32, copy=False)


@dataclass
class ClipSet:
    """All clips of a manifest stacked for batch processing."""

    volumes: np.ndarray  # (n, L, 3, H, W) float32
    labels: np.ndarray  # (n,)
    video_index: np.ndarray  # (n,) position of the source video in the manifest
    clip_index: np.ndarray  # (n,)
    corrupted: np.ndarray  # (n,) bool
    video_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def video_slices(self) -> list[np.ndarray]:
        order = np.argsort(self.video_index, kind="stable")
        bounds = np.flatnonzero(np.diff(self.video_index[order])) + 1
        return np.split(order, bounds)


def load_clip_set(manifest: DatasetManifest) -> ClipSet:
    volumes, labels, vids, cidx, corr = [], [], [], [], []
    for v_i, video in enumerate(manifest.iter_videos()):
        for clip in segment(video, manifest.clip_length):
            volumes.append(clip.volume)
            labels.append(video.label)
            vids.append(v_i)
            cidx.append(clip.index)
            corr.append(clip.corrupted)
    return ClipSet(
        volumes=np.stack(volumes).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        video_index=np.asarray(vids, dtype=np.int64),
        clip_index=np.asarray(cidx, dtype=np.int64),
        corrupted=np.asarray(corr, dtype=bool),
        video_ids=[e.id for e in manifest.entries],
    )


# ---------------------------------------------------------------------------
# Manifest persistence


def write_manifest(manifest: DatasetManifest, directory: Path) -> Path:
    header = {
        "format_version": FORMAT_VERSION,
        "num_classes": manifest.num_classes,
        "clip_length": manifest.clip_length,
        "seed": manifest.generator_seed,
        "params": manifest.params,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for e in manifest.entries:
        lines.append(
            json.dumps(
                {"id": e.id, "path": e.path, "label": e.label, "clip_corrupted": e.clip_corrupted},
                sort_keys=True,
            )
        )
    path = Path(directory) / MANIFEST_NAME
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def save_corpus(manifest: DatasetManifest, directory: str | os.PathLike) -> Path:
    """Write the manifest and a copy of every video file into ``directory``."""
    dest = Path(directory)
    dest.mkdir(parents=True, exist_ok=True)
    if manifest.root is None or Path(manifest.root).resolve() != dest.resolve():
        for e in manifest.entries:
            target = dest / e.path
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(manifest.video_path(e), target)
    return write_manifest(manifest, dest)


def load_corpus(directory: str | os.PathLike, verify: bool = True) -> DatasetManifest:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"missing manifest: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported format version {header.get('format_version')}")
    try:
        entries = [ManifestEntry(r["id"], r["path"], int(r["label"]), [bool(x) for x in r["clip_corrupted"]]) for r in rows]
        manifest = DatasetManifest(
            entries,
            int(header["num_classes"]),
            int(header["clip_length"]),
            int(header["seed"]),
            dict(header.get("params", {})),
            root=root,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    if not entries:
        raise ManifestError(f"{path}: manifest lists no videos")
    if verify:
        for e in entries:
            if not 0 <= e.label < manifest.num_classes:
                raise ManifestError(f"{e.id}: label {e.label} outside [0, {manifest.num_classes})")
            manifest.load_video(e)
    return manifest


def dataset_hash(manifest: DatasetManifest) -> str:
    """Content hash over the manifest and every referenced file (first 16 hex chars)."""
    h = hashlib.sha256()
    h.update(json.dumps([manifest.num_classes, manifest.clip_length, manifest.generator_seed]).encode())
    for e in manifest.entries:
        h.update(json.dumps([e.id, e.label, e.clip_corrupted]).encode())
        h.update(manifest.video_path(e).read_bytes())
    return h.hexdigest()[:16]
