"""Training loops for the teacher and every student variant."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import distill, nets
from .distill import LossConfig, PseudoLabelTable
from .exceptions import CheckpointError, ConfigError, NumericError
from .videodata import ClipSet

log = logging.getLogger(__name__)

METHODS = ("teacher", "condi-sr", "st-ent", "st-conf", "naive-bce")
STUDENT_METHODS = METHODS[1:]
CONF_DECAY = 5.0
MAIN_DECAY = 1.25


@dataclass
class TrainConfig:
    method: str = "teacher"
    epochs: int = 10
    base_lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    momentum: float = 0.9
    init_from: str | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    kd: float
    conf: float
    clip_accuracy: float
    lr_main: float
    lr_conf: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        names = [f.name for f in fields(EpochRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))
        return path

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[k]) for k in
                    ("loss", "kd", "conf", "clip_accuracy", "lr_main", "lr_conf"))) for r in rows])


def lr_schedule(base_lr: float, epochs: int) -> tuple[list[float], list[float]]:
    """Per-epoch (main, confidence) learning rates.

    Both start at ``base_lr``; from the second epoch on the main branch is
    divided by 1.25 and the confidence branch by 5 each epoch.
    """
    main = [base_lr / MAIN_DECAY**e for e in range(epochs)]
    conf = [base_lr / CONF_DECAY**e for e in range(epochs)]
    return main, conf


def hyperparameter_grid(base: TrainConfig, grid: dict | None = None) -> list[TrainConfig]:
    """Cartesian expansion of ``grid`` over ``base``.

    Keys are TrainConfig fields or LossConfig fields (``tau``, ``lambda``,
    ``mu``, ``conf_weight``). Unlisted fields, including the seed, keep their
    base values.
    """
    if not grid:
        return [replace(base, loss=replace(base.loss))]
    loss_keys = {"tau", "lambda", "lam", "mu", "conf_weight"}
    train_keys = {f.name for f in fields(TrainConfig)} - {"loss"}
    for key in grid:
        if key not in loss_keys | train_keys:
            raise ConfigError(f"unknown grid key {key!r}")
    keys = list(grid)
    configs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        loss = base.loss.to_dict()
        top = {}
        for k, v in zip(keys, values):
            if k in loss_keys:
                loss["lambda" if k == "lam" else k] = v
            else:
                top[k] = v
        configs.append(replace(base, loss=LossConfig.from_dict(loss), **top))
    return configs


@contextmanager
def deterministic(seed: int):
    """Seed torch and force deterministic kernels for the duration."""
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle globally, then interleave classes so each batch is near class-balanced."""
    labels = np.asarray(labels)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    order = []
    longest = max((len(p) for p in pools), default=0)
    for i in range(longest):
        order.extend(int(p[i]) for p in pools if i < len(p))
    order = np.asarray(order, dtype=np.int64)
    return [order[lo : lo + batch_size] for lo in range(0, len(order), batch_size)]


def _optimizer(net: nets.ClipNet, cfg: TrainConfig) -> torch.optim.SGD:
    groups = [{"params": nets.main_parameters(net), "lr": cfg.base_lr, "name": "main"}]
    conf = nets.confidence_parameters(net)
    if conf:
        groups.append({"params": conf, "lr": cfg.base_lr, "name": "conf"})
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum)


def _set_lrs(opt: torch.optim.SGD, main: float, conf: float) -> None:
    for g in opt.param_groups:
        g["lr"] = conf if g["name"] == "conf" else main


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value):
        raise NumericError(f"{what} became non-finite")


def fit_teacher(net: nets.ClipNet, volumes: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> TrainLog:
    """Cross-entropy training of a clip classifier in place."""
    rng = np.random.default_rng(cfg.seed)
    main_lrs, _ = lr_schedule(cfg.base_lr, cfg.epochs)
    opt = _optimizer(net, cfg)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    train_log = TrainLog()
    for epoch in range(cfg.epochs):
        _set_lrs(opt, main_lrs[epoch], main_lrs[epoch])
        net.train()
        tot, hits, seen = 0.0, 0, 0
        for idx in stratified_batches(labels, cfg.batch_size, rng):
            x = torch.from_numpy(volumes[idx])
            y = y_all[idx]
            logits = net(x)["class"]
            loss = F.cross_entropy(logits, y)
            _check_finite(loss, "teacher loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            hits += int((logits.argmax(1) == y).sum())
            seen += len(idx)
        rec = EpochRecord(epoch + 1, tot / seen, 0.0, 0.0, hits / seen, main_lrs[epoch], main_lrs[epoch])
        train_log.records.append(rec)
        log.info("teacher epoch %d loss %.4f acc %.3f", rec.epoch, rec.loss, rec.clip_accuracy)
    net.eval()
    return train_log


def teacher_logits(teacher: nets.ClipNet, volumes: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    chunks = [nets.teacher_forward(teacher, volumes[lo : lo + batch_size]) for lo in range(0, len(volumes), batch_size)]
    return torch.cat(chunks) if chunks else torch.zeros(0)


def student_loss(method: str, out: nets.StudentOutput, t_logits, z, y, loss_cfg: LossConfig):
    """(total, kd part, conf part) for a student method."""
    zero = out.class_logits.new_zeros(())
    if method == "condi-sr":
        return tuple(distill.condi_sr_loss(t_logits, out, z, loss_cfg))
    if method == "st-ent":
        kd = distill.st_ent_loss(t_logits, out, loss_cfg.tau)
        return kd, kd, zero
    if method == "st-conf":
        total = distill.st_conf_loss(out, y, loss_cfg.conf_weight)
        return total, zero, total
    if method == "naive-bce":
        conf = distill.naive_bce_loss(out, z, loss_cfg.mu)
        return conf, zero, conf
    raise ConfigError(f"{method!r} is not a student method")


def fit_student(
    net: nets.ClipNet,
    volumes: np.ndarray,
    labels: np.ndarray,
    t_logits: torch.Tensor | None,
    z: np.ndarray | None,
    cfg: TrainConfig,
) -> TrainLog:
    """Train a two-headed student in place with the configured objective.

    ``t_logits`` are the frozen teacher's logits for ``volumes``; ``z`` the
    pseudo-confidence labels. Either may be None when the method ignores it.
    """
    if cfg.method not in STUDENT_METHODS:
        raise ConfigError(f"{cfg.method!r} is not a student method")
    if cfg.method in ("condi-sr", "naive-bce") and z is None:
        raise ConfigError(f"{cfg.method} requires pseudo labels")
    if cfg.method in ("condi-sr", "st-ent") and t_logits is None:
        raise ConfigError(f"{cfg.method} requires teacher logits")
    rng = np.random.default_rng(cfg.seed)
    main_lrs, conf_lrs = lr_schedule(cfg.base_lr, cfg.epochs)
    opt = _optimizer(net, cfg)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    z_all = torch.as_tensor(z, dtype=torch.float32) if z is not None else None
    train_log = TrainLog()
    for epoch in range(cfg.epochs):
        _set_lrs(opt, main_lrs[epoch], conf_lrs[epoch])
        net.train()
        sums = np.zeros(3)
        hits = seen = 0
        for idx in stratified_batches(labels, cfg.batch_size, rng):
            raw = net(torch.from_numpy(volumes[idx]))
            out = nets.StudentOutput(raw["class"], raw["confidence"][:, 0])
            total, kd, conf = student_loss(
                cfg.method, out,
                t_logits[idx] if t_logits is not None else None,
                z_all[idx] if z_all is not None else None,
                y_all[idx], cfg.loss,
            )
            _check_finite(total, f"{cfg.method} loss")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([total.item(), kd.item(), conf.item()]) * len(idx)
            hits += int((out.class_logits.argmax(1) == y_all[idx]).sum())
            seen += len(idx)
        m = sums / seen
        rec = EpochRecord(epoch + 1, m[0], m[1], m[2], hits / seen, main_lrs[epoch], conf_lrs[epoch])
        train_log.records.append(rec)
        log.info("%s epoch %d loss %.4f kd %.4f conf %.4f", cfg.method, rec.epoch, rec.loss, rec.kd, rec.conf)
    net.eval()
    return train_log


# ---------------------------------------------------------------------------
# Manifest-level entry points


def _clip_set(data) -> ClipSet:
    from .videodata import DatasetManifest, load_clip_set

    return load_clip_set(data) if isinstance(data, DatasetManifest) else data


def _init_net(descriptor: dict, cfg: TrainConfig) -> nets.ClipNet:
    net = nets.build(descriptor, seed=cfg.seed)
    if cfg.init_from:
        nets.load_checkpoint(cfg.init_from, descriptor).load_into(net)
    return net


def train_teacher(cfg: TrainConfig, data, descriptor: dict | None = None):
    """Train the reference (or given) teacher. Returns (checkpoint, log)."""
    clips = _clip_set(data)
    if descriptor is None:
        L, _, H, _ = clips.volumes.shape[1:]
        descriptor = nets.reference_teacher(int(clips.labels.max()) + 1 if len(clips) else 2, L, H)
    with deterministic(cfg.seed):
        net = _init_net(descriptor, cfg)
        train_log = fit_teacher(net, clips.volumes, clips.labels, cfg)
    return nets.ParameterCheckpoint.from_net(net, cfg.seed), train_log


def distill_student(
    cfg: TrainConfig,
    teacher: nets.ParameterCheckpoint | nets.ClipNet,
    table: PseudoLabelTable | None,
    data,
    descriptor: dict | None = None,
):
    """Distil a student from a frozen teacher. Returns (checkpoint, log)."""
    if cfg.method not in STUDENT_METHODS:
        raise ConfigError(f"{cfg.method!r} is not a student method")
    clips = _clip_set(data)
    teacher_net = teacher.to_net() if isinstance(teacher, nets.ParameterCheckpoint) else teacher
    if "confidence" in teacher_net.heads:
        raise CheckpointError("the teacher checkpoint holds a student architecture")
    num_classes = teacher_net.descriptor["num_classes"]
    if descriptor is None:
        L, _, H, _ = clips.volumes.shape[1:]
        descriptor = nets.reference_student(num_classes, L, H)
    if descriptor["num_classes"] != num_classes:
        raise CheckpointError("teacher and student disagree on the number of classes")
    z = None
    if table is not None:
        z = table.lookup([clips.video_ids[v] for v in clips.video_index], clips.clip_index)
    elif cfg.method in ("condi-sr", "naive-bce"):
        raise ConfigError(f"{cfg.method} requires a pseudo-label table")
    with deterministic(cfg.seed):
        t_logits = teacher_logits(teacher_net, clips.volumes)
        net = _init_net(descriptor, cfg)
        train_log = fit_student(net, clips.volumes, clips.labels, t_logits, z, cfg)
    return nets.ParameterCheckpoint.from_net(net, cfg.seed), train_log


def write_run(directory: str | os.PathLike, ckpt: nets.ParameterCheckpoint, train_log: TrainLog, cfg: TrainConfig) -> Path:
    """Checkpoint, CSV log and the resolved config side by side."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(ckpt, d / "model.ckpt")
    train_log.to_csv(d / "train_log.csv")
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return d / "model.ckpt"
