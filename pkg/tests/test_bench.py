import json
import logging
import pytest

from condistill import bench
from condistill.bench import ExperimentSpec, GridCell, ReportTable, StageCache
from condistill.exceptions import ConfigError, StageError, exit_code
from condistill.inference import MetricsRecord

TINY_CORPUS = dict(num_train=24, num_test=8, num_classes=3, frames_per_video=24, frame_size=16, clip_length=8)


def tiny_spec(**over) -> ExperimentSpec:
    d = dict(
        corpus=TINY_CORPUS,
        teacher={"epochs": 1, "base_lr": 0.05},
        student_defaults={"epochs": 1, "base_lr": 0.05},
        students={"condi-sr": {}, "st-ent": {}},
        grid=[
            {"regime": "dense"},
            {"regime": "topk", "sampler": ["random", "equidistant", "oracle"], "K": [1, 3]},
            {"regime": "topk", "sampler": "confidence", "method": "condi-sr", "K": [1, 3]},
            {"regime": "topk", "sampler": "entropy", "method": ["st-ent", "condi-sr"], "K": 3},
            {"regime": "divided", "method": "condi-sr", "K": 3, "K_s": "all"},
        ],
        seeds=[0, 1],
        random_repeats=2,
    )
    d.update(over)
    return ExperimentSpec.from_dict(d)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    return cache, bench.run_experiment(tiny_spec(), cache)


def record(top1, K=1, sampler="random", seed=0, **kw):
    base = dict(regime="topk", sampler=sampler, K=K, K_s=0, top1=top1, mean_flops=10.0, mean_wall_s=0.001,
                auroc=float("nan"), seed=seed, dataset_hash="h", method="")
    base.update(kw)
    return MetricsRecord(**base)


# -- spec ------------------------------------------------------------------------------------


def test_reference_spec_cells():
    cells = ExperimentSpec().cells()
    assert cells[0] == GridCell("dense")
    divided = [c for c in cells if c.regime == "divided"]
    assert [c.K_s for c in divided] == [0, 1, 2, 3, 4]
    confidence = {c.method for c in cells if c.sampler == "confidence" and c.regime == "topk"}
    assert confidence == {"condi-sr", "naive-bce", "st-conf"}
    assert len({bench.astuple_cell(c) for c in cells}) == len(cells)


@pytest.mark.parametrize("bad", [
    dict(grid=[{"regime": "sparse"}]),
    dict(grid=[{"regime": "topk", "sampler": "loudest"}]),
    dict(grid=[{"regime": "topk", "sampler": "confidence", "method": "naive-bce"}]),
    dict(grid=[{"regime": "divided", "method": "condi-sr", "K": 2, "K_s": 3}]),
    dict(grid=[{"regime": "topk", "K": 0, "sampler": "random"}]),
    dict(grid=[{"regime": "dense", "stride": 2}]),
    dict(students={"mse": {}}),
    dict(seeds=[]),
    dict(workers=4),
])
def test_spec_errors(bad):
    with pytest.raises(ConfigError):
        tiny_spec(**bad)


def test_spec_json_round_trip(tmp_path):
    spec = tiny_spec()
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert ExperimentSpec.from_json(p) == spec
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentSpec.from_json(p)


def test_duplicate_cells_collapse():
    spec = tiny_spec(grid=[{"regime": "dense"}, {"regime": "dense"}, {"regime": "topk", "sampler": "random", "K": [1, 1]}])
    assert len(spec.cells()) == 2


# -- stage cache ---------------------------------------------------------------------------------


def test_stage_cache_builds_once(tmp_path):
    cache = StageCache(tmp_path)
    calls = []

    def build(d):
        calls.append(1)
        (d / "x.txt").write_text("hello")

    a = cache.get("demo", {"n": 1}, build)
    b = cache.get("demo", {"n": 1}, build)
    assert a == b and len(calls) == 1 and (a / "x.txt").read_text() == "hello"
    assert cache.get("demo", {"n": 2}, build) != a and len(calls) == 2
    assert not list(tmp_path.glob(".tmp-*"))


def test_stage_cache_detects_corruption(tmp_path, caplog):
    cache = StageCache(tmp_path)

    def build(d):
        (d / "x.txt").write_text("hello")

    path = cache.get("demo", {}, build)
    (path / "x.txt").write_text("hellO")
    with caplog.at_level(logging.WARNING, logger="condistill"):
        again = cache.get("demo", {}, build)
    assert "corruption" in caplog.text
    assert (again / "x.txt").read_text() == "hello"


def test_stage_failure_names_stage(tmp_path):
    cache = StageCache(tmp_path)

    def build(d):
        raise ConfigError("boom")

    with pytest.raises(StageError, match="stage 'teacher' failed: boom") as info:
        cache.get("teacher", {}, build)
    assert exit_code(info.value) == 2
    assert not list(tmp_path.iterdir())


def test_experiment_failure_names_stage(tmp_path):
    spec = tiny_spec(corpus={**TINY_CORPUS, "corrupt_prob": 1.5})
    with pytest.raises(StageError, match="corpus_train"):
        bench.run_experiment(spec, tmp_path)


# -- experiment ------------------------------------------------------------------------------------


def test_experiment_rows(experiment):
    _, table = experiment
    cells = tiny_spec().cells()
    assert len(table.per_seed()) == 2 * len(cells)
    assert len(table.aggregate_rows()) == len(cells)
    ks = sorted(r.K_s for r in table.select(aggregate=True, regime="divided"))
    assert ks == [0, 1, 2, 3]
    for r in table.per_seed():
        assert 0 <= r.top1 <= 1 and r.mean_flops > 0


def test_full_k_makes_samplers_equal(experiment):
    _, table = experiment
    dense = table.value("top1", regime="dense")
    for sampler, method in [("random", ""), ("equidistant", ""), ("oracle", ""), ("confidence", "condi-sr"),
                            ("entropy", "st-ent"), ("entropy", "condi-sr")]:
        assert abs(table.value("top1", regime="topk", sampler=sampler, method=method, K=3) - dense) <= 1e-9


def test_warm_cache_rerun_identical(experiment):
    cache, table = experiment
    again = bench.run_experiment(tiny_spec(), cache)
    assert again.meta["cache_built"] == []
    assert len(again.meta["cache_hits"]) == len(table.meta["cache_built"])
    assert bench.strip_wall_times(again) == bench.strip_wall_times(table)


def test_changed_student_params_rebuild_only_students(experiment):
    cache, _ = experiment
    spec = tiny_spec(student_defaults={"epochs": 2, "base_lr": 0.05}, seeds=[0])
    t = bench.run_experiment(spec, cache)
    assert sorted(n.split("-")[0] for n in t.meta["cache_built"]) == ["student", "student"]
    assert {n.split("-")[0] for n in t.meta["cache_hits"]} == {"corpus_train", "corpus_test", "teacher", "labels"}


def test_changed_corpus_rebuilds_everything_downstream(experiment):
    cache, _ = experiment
    spec = tiny_spec(corpus={**TINY_CORPUS, "corrupt_prob": 0.2}, seeds=[0])
    t = bench.run_experiment(spec, cache)
    built = sorted(n.split("-")[0] for n in t.meta["cache_built"])
    assert built == ["corpus_test", "corpus_train", "labels", "student", "student", "teacher"]


# -- rendering ------------------------------------------------------------------------------------


@pytest.mark.example
def test_empty_table_header_only_csv():
    text = bench.render_report(ReportTable(), "csv")
    assert text == ",".join(bench.COLUMNS) + "\n"
    assert len(bench.parse_report_csv(text)) == 0


@pytest.mark.example
def test_ties_are_all_bold():
    rows = [record(0.5, sampler="random", seed="mean"), record(0.5, sampler="equidistant", seed="mean"),
            record(0.25, sampler="oracle", seed="mean")]
    md = bench.report_to_markdown(ReportTable(rows))
    pivot = md.split("\n\n")[0]
    assert pivot.count("**50.00**") == 2 and "**25.00**" not in pivot


@pytest.mark.example
def test_csv_round_trip_idempotent(experiment, tmp_path):
    _, table = experiment
    text = bench.render_report(table, "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    parsed = bench.parse_report_csv(text)
    assert bench.report_to_csv(parsed) == text
    # repr comparison so NaN AUROC cells compare equal
    assert [repr(r.to_row()) for r in parsed.rows] == [repr(r.to_row()) for r in table.rows]
    assert bench.report_to_markdown(parsed) == bench.report_to_markdown(table)


def test_csv_errors():
    with pytest.raises(ConfigError):
        bench.parse_report_csv("")
    with pytest.raises(ConfigError):
        bench.parse_report_csv("regime,sampler\n")
    header = ",".join(bench.COLUMNS)
    with pytest.raises(ConfigError):
        bench.parse_report_csv(header + "\ntopk,random,one\n")
    with pytest.raises(ConfigError):
        bench.render_report(ReportTable(), "xlsx")


def test_aggregate_means():
    t = ReportTable([record(0.2, seed=0), record(0.6, seed=1), record(1.0, K=3, seed=0)]).with_aggregates()
    assert t.value("top1", K=1) == pytest.approx(0.4)
    assert t.value("top1", K=3) == 1.0
    with pytest.raises(KeyError):
        t.value("top1", K=7)


def test_plots(experiment, tmp_path):
    pytest.importorskip("matplotlib")
    _, table = experiment
    paths = bench.plot_report(table, tmp_path / "plots")
    assert [p.name for p in paths] == ["accuracy_vs_k.png", "accuracy_vs_flops.png"]
    assert all(p.read_bytes()[:4] == b"\x89PNG" for p in paths)
