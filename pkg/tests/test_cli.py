import csv
import json

import pytest

from symdistill import cli
from symdistill.config import ConfigError, from_dict
from symdistill.report import ReportError, build_report

SMALL = {
    "task": {"preset": "p1", "dim": 6},
    "teacher": {"kind": "l2o", "model": {"variant": "rp_small_extra"}},
    "meta_train": {"meta_iterations": 5, "meta_lr": 0.003, "segments": 2, "tasks_per_batch": 2},
    "db": {"n": 300, "steps_per_task": 40},
    "sr": {"iterations": 6, "population": 30},
    "tune": {"steps": 2, "unroll": 10, "segments": 2, "val_tasks": 2, "val_every": 1, "task": {"preset": "p1", "dim": 8}},
    "evaluate": {"steps": 25, "seeds": 2},
}
SGD_CFG = {
    "task": {"preset": "p1", "dim": 6},
    "teacher": {"kind": "classical", "optimizer": {"kind": "sgd", "lr": 0.01}},
    "db": {"n": 300, "steps_per_task": 40},
    "sr": {"iterations": 25, "population": 40},
    "tune": {"steps": 1, "unroll": 5, "segments": 1, "val_tasks": 1},
    "evaluate": {"steps": 20, "seeds": 2},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_config_defaults_and_roundtrip():
    cfg = from_dict({})
    assert cfg.sr.iterations == 300 and cfg.db.n == 5000 and cfg.select.delta == 0.05
    assert cfg.meta_train.unroll == 20 and cfg.evaluate.seeds == list(range(20))
    again = from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"sr": {"iterations": 3, "pop": 2}},
    {"task": {"preset": "p9"}},
    {"task": {"family": "rastrigin", "depth": 3}},
    {"teacher": {"kind": "classical"}},
    {"teacher": {"model": {"variant": "lstm9"}}},
    {"tune": {"steps": -1}},
    {"tune": {"skeleton": "other"}},
    {"evaluate": {"seeds": []}},
    {"seeds": {"base": -1}},
    {"db": {"n": 0}},
])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_seed_override_reaches_every_stage():
    cfg = from_dict({"sr": {"seed": 3}, "tune": {"seed": 4}}, seed=9, workers=2)
    assert cfg.sr.seed == 9 and cfg.tune.config.seed == 9 and cfg.db.seed == 9 and cfg.meta_train.seed == 9
    assert cfg.sr.workers == 2
    kept = from_dict({"seeds": {"base": 5}, "sr": {"seed": 3}})
    assert kept.sr.seed == 3 and kept.db.seed == 5


def test_config_error_exit_code(tmp_path, capsys):
    path = _write(tmp_path, {"nonsense": True})
    assert cli.main(["pipeline", "--config", path, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert not (tmp_path / "o").exists()
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{")
    assert cli.main(["gen-db", "--config", str(bad_json), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_stage_missing_inputs(tmp_path, capsys):
    path = _write(tmp_path, SMALL)
    code = cli.main(["distill", "--config", path, "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_STAGE
    assert "db.jsonl" in capsys.readouterr().err


def test_pipeline_deterministic_and_resumable(tmp_path):
    path = _write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["pipeline", "--config", path, "--out", str(a)]) == 0
    assert cli.main(["pipeline", "--config", path, "--out", str(b), "--workers", "2"]) == 0
    # config.json records the worker count; every computed artifact must agree
    for f in sorted(a.glob("*.json")) + [a / "db.jsonl", a / "front.csv"]:
        if f.name == "config.json":
            continue
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name
    before = (a / "distill.json").read_bytes()
    assert cli.main(["pipeline", "--config", path, "--out", str(a)]) == 0
    assert (a / "distill.json").read_bytes() == before
    md = (a / "report.md").read_text()
    for heading in ("Trajectory database", "Pareto front", "Interpretability", "Before and after tuning",
                    "Loss trajectories"):
        assert f"## {heading}" in md
    assert "Missing artifacts" not in md
    rows = list(csv.DictReader(open(a / "front.csv")))
    assert rows and {"complexity", "r2", "mse", "equation"} <= set(rows[0])


def test_sgd_source_pipeline(tmp_path):
    out = tmp_path / "sgd"
    assert cli.main(["pipeline", "--config", _write(tmp_path, SGD_CFG), "--out", str(out)]) == 0
    dist = json.loads((out / "distill.json").read_text())
    assert dist["selected"]["r2"] >= 0.999
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["tpf"] == {"g": 0.0}
    assert metrics["reference"]["tpf"] == 0.0
    teacher = json.loads((out / "teacher.json").read_text())
    assert teacher["kind"] == "classical"


def test_single_stages_in_sequence(tmp_path):
    path = _write(tmp_path, SGD_CFG)
    out = str(tmp_path / "s")
    for stage in ("meta-train", "gen-db", "distill", "metrics"):
        assert cli.main([stage, "--config", path, "--out", out]) == 0, stage
    assert cli.main(["report", "--out", out]) == 0


def test_report_empty_dir(tmp_path):
    with pytest.raises(ReportError) as exc:
        build_report(tmp_path)
    for name in ("db_stats.json", "distill.json", "metrics.json", "eval.json", "eval_trajectories.csv"):
        assert name in str(exc.value)
    assert cli.main(["report", "--out", str(tmp_path)]) == cli.EXIT_STAGE


def test_report_db_only(tmp_path):
    path = _write(tmp_path, SGD_CFG)
    out = tmp_path / "d"
    cli.main(["meta-train", "--config", path, "--out", str(out)])
    cli.main(["gen-db", "--config", path, "--out", str(out)])
    (out / "db_stats.json").unlink()
    md, svgs = build_report(out)
    assert "## Trajectory database" in md and "## Pareto front" not in md and not svgs
