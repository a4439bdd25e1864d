"""End-to-end experiments with cached stages, and their report tables.

An experiment runs generate -> train teacher -> label -> distil -> evaluate
for every seed. Each stage's output directory is keyed by a hash of its
parameters and of its upstream keys, so editing one parameter rebuilds that
stage and everything downstream of it and nothing else. Evaluation is never
cached.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import inference, nets, trainer, videodata
from .distill import PseudoLabelTable, make_pseudo_labels
from .exceptions import CondistillError, ConfigError, StageError
from .inference import MetricsRecord

log = logging.getLogger(__name__)

COLUMNS = tuple(f.name for f in fields(MetricsRecord))
INT_COLUMNS = ("K", "K_s")
FLOAT_COLUMNS = ("top1", "mean_flops", "mean_wall_s", "auroc", "median_wall_s")
WALL_COLUMNS = ("mean_wall_s", "median_wall_s")
AGGREGATE_SEED = "mean"
STAGE_MANIFEST = "_stage.json"


# ---------------------------------------------------------------------------
# Experiment description


@dataclass
class CorpusParams:
    num_train: int = 500
    num_test: int = 200
    num_classes: int = 6
    frames_per_video: int = 64
    frame_size: int = 16
    clip_length: int = 8
    corrupt_prob: float = 0.3
    train_seed: int = 1000  # per-seed corpora use train_seed + seed
    test_seed: int = 2000

    def split(self, name: str, seed: int) -> dict:
        n = self.num_train if name == "train" else self.num_test
        base = self.train_seed if name == "train" else self.test_seed
        return dict(
            num_videos=n,
            num_classes=self.num_classes,
            frames_per_video=self.frames_per_video,
            frame_size=self.frame_size,
            corrupt_prob=self.corrupt_prob,
            seed=base + seed,
            clip_length=self.clip_length,
        )

    @property
    def clips_per_video(self) -> int:
        return math.ceil(self.frames_per_video / self.clip_length)


@dataclass
class GridCell:
    """One evaluation configuration; the experiment runs it once per seed."""

    regime: str
    sampler: str = "all"
    method: str = ""
    K: int = 0
    K_s: int = 0


REFERENCE_KS = [1, 3, 5]
REFERENCE_GRID = [
    {"regime": "dense"},
    {"regime": "topk", "sampler": ["random", "equidistant", "oracle"], "K": REFERENCE_KS},
    {"regime": "topk", "sampler": "confidence", "method": ["condi-sr", "naive-bce", "st-conf"], "K": REFERENCE_KS},
    {"regime": "topk", "sampler": "entropy", "method": ["st-ent", "condi-sr"], "K": REFERENCE_KS},
    {"regime": "divided", "sampler": "confidence", "method": "condi-sr", "K": 4, "K_s": "all"},
]


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentSpec:
    """Corpus parameters, train configs per role and the evaluation grid.

    The defaults describe the desk-scale reference experiment: every student
    method, every sampler, both regimes, seeds 0-2.

    ``grid`` entries are dicts with ``regime`` and optional ``sampler``,
    ``method``, ``K`` and ``K_s``; any of those may be a list, and
    ``K_s: "all"`` expands to 0..K. ``students`` maps a method name to
    overrides of ``student_defaults``.
    """

    corpus: CorpusParams = field(default_factory=CorpusParams)
    teacher: dict = field(default_factory=lambda: {"epochs": 15, "base_lr": 0.05})
    student_defaults: dict = field(default_factory=lambda: {"epochs": 10, "base_lr": 0.05})
    students: dict = field(default_factory=lambda: {m: {} for m in trainer.STUDENT_METHODS})
    grid: list = field(default_factory=lambda: json.loads(json.dumps(REFERENCE_GRID)))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    random_repeats: int = 3
    weighted: bool = False

    def __post_init__(self):
        if isinstance(self.corpus, dict):
            self.corpus = CorpusParams(**self.corpus)
        for m in self.students:
            if m not in trainer.STUDENT_METHODS:
                raise ConfigError(f"unknown student method {m!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.random_repeats < 1:
            raise ConfigError("random_repeats must be >= 1")
        self.cells()  # validates the grid

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment spec: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ExperimentSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = asdict(self.corpus)
        return d

    def cells(self) -> list[GridCell]:
        out = []
        for entry in self.grid:
            entry = dict(entry)
            regime = entry.pop("regime", None)
            if regime not in inference.REGIMES:
                raise ConfigError(f"grid entry has unknown regime {regime!r}")
            unknown = set(entry) - {"sampler", "method", "K", "K_s"}
            if unknown:
                raise ConfigError(f"unknown grid keys {sorted(unknown)}")
            if regime == "dense":
                out.append(GridCell("dense"))
                continue
            samplers = _as_list(entry.get("sampler", "confidence"))
            methods = _as_list(entry.get("method", ""))
            for sampler, method, K in itertools.product(samplers, methods, _as_list(entry.get("K", 3))):
                if sampler not in inference.SAMPLERS:
                    raise ConfigError(f"unknown sampler {sampler!r}")
                if int(K) < 1:
                    raise ConfigError("K must be >= 1")
                learned = regime == "divided" or sampler in inference.LEARNED_SAMPLERS
                if learned and method not in self.students:
                    raise ConfigError(f"{regime}/{sampler} needs a trained student method, got {method!r}")
                if regime == "divided" and sampler != "confidence":
                    raise ConfigError("the divided regime ranks by confidence")
                method = method if learned else ""
                if regime == "topk":
                    out.append(GridCell("topk", sampler, method, int(K)))
                    continue
                ks = entry.get("K_s", 0)
                ks = range(int(K) + 1) if ks == "all" else _as_list(ks)
                for k_s in ks:
                    if not 0 <= int(k_s) <= int(K):
                        raise ConfigError(f"K_s={k_s} outside [0, {K}]")
                    out.append(GridCell("divided", "confidence", method, int(K), int(k_s)))
        # duplicates would produce duplicate rows
        seen, uniq = set(), []
        for c in out:
            key = astuple_cell(c)
            if key not in seen:
                seen.add(key)
                uniq.append(c)
        return uniq


def astuple_cell(c: GridCell) -> tuple:
    return (c.regime, c.sampler, c.method, c.K, c.K_s)


# ---------------------------------------------------------------------------
# Stage cache


def _canonical_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_digests(root: Path) -> dict[str, str]:
    return {
        p.relative_to(root).as_posix(): _file_digest(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != STAGE_MANIFEST
    }


class StageCache:
    """Content-addressed directories, one per (stage, key).

    A stage directory is built under a temporary name and renamed into place
    once complete, together with a list of the sha256 of every file in it.
    A directory whose files no longer match that list is discarded and
    rebuilt.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits: list[str] = []
        self.built: list[str] = []

    @staticmethod
    def key(stage: str, payload: dict) -> str:
        return _canonical_hash({"stage": stage, **payload})

    def path(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key}"

    def verify(self, directory: Path) -> bool:
        try:
            recorded = json.loads((directory / STAGE_MANIFEST).read_text())["files"]
        except (OSError, ValueError, KeyError):
            return False
        return recorded == _tree_digests(directory)

    def get(self, stage: str, payload: dict, build: Callable[[Path], None]) -> Path:
        key = self.key(stage, payload)
        final = self.path(stage, key)
        name = f"{stage}-{key}"
        if final.exists():
            if self.verify(final):
                self.hits.append(name)
                return final
            log.warning("cache corruption detected in %s; rebuilding", name)
            shutil.rmtree(final)
        tmp = self.root / f".tmp-{name}-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        try:
            build(tmp)
            manifest = {"stage": stage, "key": key, "payload": payload, "files": _tree_digests(tmp)}
            (tmp / STAGE_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
            os.replace(tmp, final)
        except CondistillError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageError(stage, exc) from exc
        except Exception as exc:  # noqa: BLE001 - anything else is still a stage failure
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageError(stage, exc) from exc
        self.built.append(name)
        return final


# ---------------------------------------------------------------------------
# Report table


@dataclass
class ReportTable:
    """Metric rows, one per (grid cell x seed), plus aggregate rows with seed "mean"."""

    rows: list[MetricsRecord] = field(default_factory=list)
    group_keys: tuple = ("regime", "sampler", "method", "K", "K_s")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def per_seed(self) -> list[MetricsRecord]:
        return [r for r in self.rows if r.seed != AGGREGATE_SEED]

    def aggregate_rows(self) -> list[MetricsRecord]:
        return [r for r in self.rows if r.seed == AGGREGATE_SEED]

    def _group(self, row: MetricsRecord) -> tuple:
        return tuple(getattr(row, k) for k in self.group_keys)

    def aggregate(self) -> list[MetricsRecord]:
        """Mean over seeds of every metric, one row per group."""
        groups: dict[tuple, list[MetricsRecord]] = {}
        for r in self.per_seed():
            groups.setdefault(self._group(r), []).append(r)
        out = []
        for rows in groups.values():
            hashes = sorted({r.dataset_hash for r in rows})
            first = rows[0]
            out.append(
                MetricsRecord(
                    regime=first.regime, sampler=first.sampler, K=first.K, K_s=first.K_s,
                    top1=float(np.mean([r.top1 for r in rows])),
                    mean_flops=float(np.mean([r.mean_flops for r in rows])),
                    mean_wall_s=float(np.mean([r.mean_wall_s for r in rows])),
                    auroc=float(np.mean([r.auroc for r in rows])),
                    seed=AGGREGATE_SEED,
                    dataset_hash=hashes[0] if len(hashes) == 1 else "+".join(hashes),
                    method=first.method,
                    median_wall_s=float(np.median([r.median_wall_s for r in rows])),
                )
            )
        return out

    def with_aggregates(self) -> "ReportTable":
        return ReportTable(self.per_seed() + self.aggregate(), self.group_keys, dict(self.meta))

    def select(self, aggregate: bool | None = None, **where) -> list[MetricsRecord]:
        rows = self.rows
        if aggregate is not None:
            rows = [r for r in rows if (r.seed == AGGREGATE_SEED) == aggregate]
        return [r for r in rows if all(getattr(r, k) == v for k, v in where.items())]

    def value(self, metric: str, **where) -> float:
        """``metric`` of the single aggregate row matching ``where``."""
        rows = self.select(aggregate=True, **where)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} aggregate rows match {where}")
        return getattr(rows[0], metric)


def _format(col: str, value) -> str:
    if col in FLOAT_COLUMNS:
        return repr(float(value))
    return str(value)


def _parse(col: str, text: str):
    if col in INT_COLUMNS:
        return int(text)
    if col in FLOAT_COLUMNS:
        return float(text)
    if col == "seed":
        return text if text == AGGREGATE_SEED else int(text)
    return text


def report_to_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in table.rows:
        d = r.to_row()
        w.writerow([_format(c, d[c]) for c in COLUMNS])
    return buf.getvalue()


def parse_report_csv(text: str) -> ReportTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigError("report CSV is empty") from None
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise ConfigError(f"report CSV lacks columns {missing}")
    pos = {c: header.index(c) for c in COLUMNS}
    rows = []
    for n, rec in enumerate(reader, start=2):
        if not rec:
            continue
        try:
            rows.append(MetricsRecord(**{c: _parse(c, rec[pos[c]]) for c in COLUMNS}))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"report CSV line {n}: {exc}") from exc
    return ReportTable(rows)


def _pct(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{100 * v:.2f}"


def report_to_markdown(table: ReportTable) -> str:
    """Top-1 pivot (rows: configuration, columns: K) with the best per column in bold,
    followed by the flat list of aggregate rows."""
    src = table.aggregate_rows() or table.aggregate()
    lines = []
    if not src:
        return "_empty report_\n"
    Ks = sorted({r.K for r in src})
    pivot: dict[tuple, dict[int, float]] = {}
    for r in src:
        pivot.setdefault((r.regime, r.sampler, r.method, r.K_s), {})[r.K] = r.top1
    best = {}
    for K in Ks:
        vals = [cells[K] for cells in pivot.values() if K in cells and not math.isnan(cells[K])]
        best[K] = max(vals) if vals else None
    lines.append("| regime | sampler | method | K_s | " + " | ".join(f"K={K}" for K in Ks) + " |")
    lines.append("|---|---|---|---|" + "---|" * len(Ks))
    for (regime, sampler, method, k_s), cells in pivot.items():
        out = []
        for K in Ks:
            if K not in cells:
                out.append("")
                continue
            v = cells[K]
            s = _pct(v)
            if best[K] is not None and not math.isnan(v) and round(v, 12) == round(best[K], 12):
                s = f"**{s}**"
            out.append(s)
        lines.append(f"| {regime} | {sampler} | {method or '-'} | {k_s} | " + " | ".join(out) + " |")
    lines.append("")
    lines.append("| regime | sampler | method | K | K_s | top1 (%) | mean GFLOPs/video | mean wall (ms) | AUROC |")
    lines.append("|---|---|---|---|---|---|---|---|---|")
    for r in src:
        auroc = "n/a" if math.isnan(r.auroc) else f"{r.auroc:.3f}"
        lines.append(
            f"| {r.regime} | {r.sampler} | {r.method or '-'} | {r.K} | {r.K_s} | {_pct(r.top1)} "
            f"| {r.mean_flops / 1e9:.4f} | {1e3 * r.mean_wall_s:.2f} | {auroc} |"
        )
    return "\n".join(lines) + "\n"


def render_report(table: ReportTable, fmt: str, path: str | os.PathLike | None = None) -> str:
    """Render as ``"csv"`` (canonical) or ``"md"``; also write to ``path`` when given."""
    if fmt == "csv":
        text = report_to_csv(table)
    elif fmt in ("md", "markdown"):
        text = report_to_markdown(table)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        from .arrayio import atomic_write_bytes

        atomic_write_bytes(Path(path), text.encode("utf-8"))
    return text


def plot_report(table: ReportTable, directory: str | os.PathLike) -> list[Path]:
    """Static accuracy-vs-K and accuracy-vs-FLOPs curves as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = [r for r in (table.aggregate_rows() or table.aggregate()) if r.regime == "topk"]
    curves: dict[str, list[MetricsRecord]] = {}
    for r in src:
        curves.setdefault(f"{r.sampler}/{r.method}" if r.method else r.sampler, []).append(r)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for name, xattr, xlabel in (("accuracy_vs_k.png", "K", "K (clips)"),
                                ("accuracy_vs_flops.png", "mean_flops", "mean FLOPs per video")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in sorted(curves.items()):
            rows = sorted(rows, key=lambda r: getattr(r, xattr))
            ax.plot([getattr(r, xattr) for r in rows], [100 * r.top1 for r in rows], marker="o", label=label)
        dense = [r for r in (table.aggregate_rows() or table.aggregate()) if r.regime == "dense"]
        if dense:
            ax.axhline(100 * dense[0].top1, color="k", ls="--", lw=1, label="dense")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("top-1 (%)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(d / name, dpi=120)
        plt.close(fig)
        out.append(d / name)
    return out


# ---------------------------------------------------------------------------
# Running


def _write_corpus(params: dict) -> Callable[[Path], None]:
    def build(tmp: Path) -> None:
        videodata.generate_corpus(tmp, **params)

    return build


def _average_records(records: list[MetricsRecord], seed: int) -> MetricsRecord:
    first = records[0]
    return MetricsRecord(
        regime=first.regime, sampler=first.sampler, K=first.K, K_s=first.K_s,
        top1=float(np.mean([r.top1 for r in records])),
        mean_flops=float(np.mean([r.mean_flops for r in records])),
        mean_wall_s=float(np.mean([r.mean_wall_s for r in records])),
        auroc=first.auroc, seed=seed, dataset_hash=first.dataset_hash, method=first.method,
        median_wall_s=float(np.median([r.median_wall_s for r in records])),
    )


def run_experiment(spec: ExperimentSpec, cache_dir: str | os.PathLike) -> ReportTable:
    """Run every stage for every seed and evaluate the grid.

    Returns a table with one row per (cell, seed) followed by the aggregate
    rows. Random-sampler rows are the mean of ``spec.random_repeats`` draws.
    """
    cache = StageCache(cache_dir)
    cells = spec.cells()
    if any(c.K > spec.corpus.clips_per_video for c in cells):
        log.warning("K above the %d clips per video is clamped per video", spec.corpus.clips_per_video)
    rows: list[MetricsRecord] = []
    stage_s: dict[str, float] = {}

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            stage_s[stage] = stage_s.get(stage, 0.0) + time.perf_counter() - t0

    for seed in spec.seeds:
        corpora = {}
        for split in ("train", "test"):
            params = spec.corpus.split(split, seed)
            corpora[split] = timed("generate", lambda: cache.get(f"corpus_{split}", params, _write_corpus(params)))
        teacher_cfg = trainer.TrainConfig.from_dict({**spec.teacher, "method": "teacher", "seed": seed})
        teacher_payload = {"corpus": corpora["train"].name, "config": teacher_cfg.to_dict()}

        def build_teacher(tmp: Path) -> None:
            manifest = videodata.load_corpus(corpora["train"])
            ckpt, tlog = trainer.train_teacher(teacher_cfg, manifest)
            trainer.write_run(tmp, ckpt, tlog, teacher_cfg)

        teacher_dir = timed("train", lambda: cache.get("teacher", teacher_payload, build_teacher))
        label_payload = {"teacher": teacher_dir.name, "corpus": corpora["train"].name}

        def build_labels(tmp: Path) -> None:
            ckpt = nets.load_checkpoint(teacher_dir / "model.ckpt")
            make_pseudo_labels(ckpt.to_net(), videodata.load_corpus(corpora["train"])).save(tmp / "labels.jsonl")

        labels_dir = timed("label", lambda: cache.get("labels", label_payload, build_labels))

        student_dirs = {}
        for method, overrides in spec.students.items():
            cfg = trainer.TrainConfig.from_dict({**spec.student_defaults, **overrides, "method": method, "seed": seed})
            payload = {"teacher": teacher_dir.name, "labels": labels_dir.name, "config": cfg.to_dict()}

            def build_student(tmp: Path, cfg=cfg) -> None:
                ckpt = nets.load_checkpoint(teacher_dir / "model.ckpt")
                table = PseudoLabelTable.load(labels_dir / "labels.jsonl")
                manifest = videodata.load_corpus(corpora["train"])
                s_ckpt, slog = trainer.distill_student(cfg, ckpt, table, manifest)
                trainer.write_run(tmp, s_ckpt, slog, cfg)

            student_dirs[method] = timed("distill", lambda: cache.get("student", payload, build_student))

        def evaluate() -> list[MetricsRecord]:
            manifest = videodata.load_corpus(corpora["test"])
            clip_set = videodata.load_clip_set(manifest)
            d_hash = videodata.dataset_hash(manifest)
            teacher = nets.load_checkpoint(teacher_dir / "model.ckpt").to_net()
            students = {m: nets.load_checkpoint(p / "model.ckpt").to_net() for m, p in student_dirs.items()}
            diags = {m: inference.clip_diagnostics(teacher, s, clip_set) for m, s in students.items()}
            out = []
            for c in cells:
                student = students.get(c.method)
                kw = dict(teacher=teacher, student=student, clip_set=clip_set, sampler=c.sampler,
                          k=c.K or None, k_s=c.K_s, dataset_hash=d_hash, method=c.method,
                          weighted=spec.weighted, diagnostics=diags.get(c.method))
                if c.regime == "topk" and c.sampler == "random":
                    reps = [inference.evaluate_split("topk", seed=seed * spec.random_repeats + r, **kw)
                            for r in range(spec.random_repeats)]
                    out.append(_average_records(reps, seed))
                else:
                    out.append(inference.evaluate_split(c.regime, seed=seed, **kw))
            return out

        try:
            rows.extend(timed("evaluate", evaluate))
        except CondistillError as exc:
            raise StageError("evaluate", exc) from exc
        log.info("seed %d done", seed)

    table = ReportTable(rows).with_aggregates()
    table.meta = {"stage_seconds": stage_s, "cache_hits": list(cache.hits), "cache_built": list(cache.built),
                  "spec": spec.to_dict()}
    return table


def strip_wall_times(table: ReportTable) -> list[tuple]:
    """Rows without the wall-clock columns, for reproducibility comparisons."""
    return [tuple(repr(v) for k, v in r.to_row().items() if k not in WALL_COLUMNS) for r in table.rows]
