"""Command-line entry point: ``condistill <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, inference, nets, trainer, videodata
from .distill import LossConfig, PseudoLabelTable, make_pseudo_labels
from .exceptions import ConfigError, exit_code

log = logging.getLogger("condistill")


def _load_config(args, method: str) -> trainer.TrainConfig:
    d = {"method": method}
    if args.config:
        try:
            d.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        d["method"] = method
    for key in ("epochs", "base_lr", "batch_size", "seed", "init_from"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    for key in ("tau", "lam", "mu"):
        v = getattr(args, key, None)
        if v is not None:
            loss = dict(d.get("loss", {}))
            loss["lambda" if key == "lam" else key] = v
            d["loss"] = LossConfig.from_dict(loss).to_dict()
    return trainer.TrainConfig.from_dict(d)


def cmd_gen_data(args) -> None:
    m = videodata.generate_corpus(
        args.out, args.num_videos, args.num_classes, args.frames_per_video, args.frame_size,
        args.corrupt_prob, args.seed, args.clip_length,
    )
    print(f"wrote {len(m.entries)} videos to {args.out} (hash {videodata.dataset_hash(m)})")


def cmd_train_teacher(args) -> None:
    cfg = _load_config(args, "teacher")
    ckpt, tlog = trainer.train_teacher(cfg, videodata.load_corpus(args.data))
    path = trainer.write_run(args.out, ckpt, tlog, cfg)
    print(f"teacher checkpoint {path} ({ckpt.digest()[:16]})")


def cmd_make_labels(args) -> None:
    teacher = nets.load_checkpoint(args.teacher).to_net()
    table = make_pseudo_labels(teacher, videodata.load_corpus(args.data))
    table.save(args.out)
    z = sum(r.z for r in table.rows)
    print(f"{len(table)} pseudo labels, {z} teacher-correct, written to {args.out}")


def cmd_distill(args) -> None:
    cfg = _load_config(args, args.method)
    table = PseudoLabelTable.load(args.labels) if args.labels else None
    ckpt, slog = trainer.distill_student(cfg, nets.load_checkpoint(args.teacher), table,
                                         videodata.load_corpus(args.data))
    path = trainer.write_run(args.out, ckpt, slog, cfg)
    print(f"{args.method} student checkpoint {path} ({ckpt.digest()[:16]})")


def cmd_evaluate(args) -> None:
    manifest = videodata.load_corpus(args.data)
    clip_set = videodata.load_clip_set(manifest)
    teacher = nets.load_checkpoint(args.teacher).to_net()
    student = nets.load_checkpoint(args.student).to_net() if args.student else None
    needs_student = args.regime == "divided" or (args.regime == "topk" and args.sampler in inference.LEARNED_SAMPLERS)
    if needs_student and student is None:
        raise ConfigError(f"--student is required for {args.regime}/{args.sampler}")
    rec = inference.evaluate_split(
        args.regime, teacher, student, clip_set, sampler=args.sampler, k=args.k, k_s=args.ks,
        seed=args.seed, dataset_hash=videodata.dataset_hash(manifest), method=args.method or "",
        weighted=args.weighted,
    )
    text = bench.render_report(bench.ReportTable([rec]), "csv", args.out)
    sys.stdout.write(text)


def cmd_bench(args) -> None:
    spec = bench.ExperimentSpec.from_json(args.spec) if args.spec else bench.ExperimentSpec()
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = bench.run_experiment(spec, args.cache or out / "cache")
    bench.render_report(table, "csv", out / "report.csv")
    bench.render_report(table, "md", out / "report.md")
    (out / "spec.resolved.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    if args.plots:
        bench.plot_report(table, out)
    sys.stdout.write(bench.report_to_markdown(table))


def cmd_report(args) -> None:
    text = Path(args.inp).read_text(encoding="utf-8")
    table = bench.parse_report_csv(text)
    out = bench.render_report(table, args.format, args.out)
    if args.plots:
        bench.plot_report(table, args.plots)
    if not args.out:
        sys.stdout.write(out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="corpus directory")
    common.add_argument("--out", help="output path")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--epochs", type=int)
    train.add_argument("--base-lr", dest="base_lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--init-from", dest="init_from")

    p = argparse.ArgumentParser(prog="condistill", description="Confidence distillation for clip sampling.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--num-videos", type=int, default=500)
    g.add_argument("--num-classes", type=int, default=6)
    g.add_argument("--frames-per-video", type=int, default=64)
    g.add_argument("--frame-size", type=int, default=16)
    g.add_argument("--clip-length", type=int, default=8)
    g.add_argument("--corrupt-prob", type=float, default=0.3)
    g.set_defaults(func=cmd_gen_data, required=("out",))

    t = sub.add_parser("train-teacher", parents=[common, train], help="train the teacher clip classifier")
    t.set_defaults(func=cmd_train_teacher, required=("data", "out"))

    m = sub.add_parser("make-labels", parents=[common], help="write teacher-correctness pseudo labels")
    m.add_argument("--teacher", required=True, help="teacher checkpoint")
    m.set_defaults(func=cmd_make_labels, required=("data", "out"))

    d = sub.add_parser("distill", parents=[common, train], help="distil a student")
    d.add_argument("--method", required=True, choices=trainer.STUDENT_METHODS)
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    d.add_argument("--labels", help="pseudo-label table (JSON lines)")
    d.add_argument("--tau", type=float)
    d.add_argument("--lambda", dest="lam", type=float)
    d.add_argument("--mu", type=float)
    d.set_defaults(func=cmd_distill, required=("data", "out"))

    e = sub.add_parser("evaluate", parents=[common], help="evaluate one regime on a split")
    e.add_argument("--regime", required=True, choices=inference.REGIMES)
    e.add_argument("--sampler", default="confidence", choices=inference.SAMPLERS)
    e.add_argument("--k", type=int, default=None, help="clips per video (default: all)")
    e.add_argument("--ks", type=int, default=0, help="clips handed to the student (divided regime)")
    e.add_argument("--teacher", required=True)
    e.add_argument("--student")
    e.add_argument("--method", help="label for the student method in the output row")
    e.add_argument("--weighted", action="store_true", help="confidence-weighted top-K average")
    e.set_defaults(func=cmd_evaluate, required=("data",))

    b = sub.add_parser("bench", parents=[common], help="run an experiment grid")
    b.add_argument("--spec", help="experiment spec JSON (default: reference experiment)")
    b.add_argument("--cache", help="stage cache directory (default: OUT/cache)")
    b.add_argument("--plots", action="store_true", help="also write accuracy curves")
    b.set_defaults(func=cmd_bench, required=("out",))

    r = sub.add_parser("report", parents=[common], help="render a metrics CSV")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=("csv", "md"), default="md")
    r.add_argument("--plots", help="directory for accuracy curves")
    r.set_defaults(func=cmd_report, required=())
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    missing = [f"--{r}" for r in args.required if getattr(args, r) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")
    if args.seed is None and args.command not in ("bench", "report"):
        args.seed = 0 if args.command in ("gen-data", "evaluate") else None
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
