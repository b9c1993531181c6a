"""Command-line driver: meta-train, gen-db, distill, metrics, tune, evaluate, pipeline, report, sanity.

Every stage reads its inputs from and writes its artifacts to the output
directory, so stages can be run one by one or resumed inside ``pipeline``.
Exit codes: 0 success, 2 config error, 3 acceptance-floor failure,
4 stage failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .distill import DistillReport, TrajectoryDB, distill, generate_db
from .exprtree import to_sexpr
from .interp import interp_report, reference_tpf_mc
from .l2o_teacher import TeacherModel, TrainLog, load_checkpoint, meta_train, save_checkpoint
from .optimizers import ClassicalConfig, FeatureParams
from .report import ReportError, write_report
from .sanity import run_sanity
from .tuner import TuneLog, evaluate, fit_eq6, load_skeleton, save_skeleton, skeletonize, tune

log = logging.getLogger("symdistill")

EXIT_OK, EXIT_CONFIG, EXIT_FLOOR, EXIT_STAGE = 0, 2, 3, 4

TEACHER = "teacher.json"
CURVE = "train_curve.csv"
DB = "db.jsonl"
DB_STATS = "db_stats.json"
DISTILL = "distill.json"
FRONT = "front.csv"
METRICS = "metrics.json"
SK_BEFORE = "skeleton_before.json"
SK_AFTER = "skeleton.json"
TUNE_LOG = "tune_log.json"
EVAL = "eval.json"
TRAJ = "eval_trajectories.csv"
SANITY = "sanity.json"


class StageError(RuntimeError):
    def __init__(self, stage, message, paths=()):
        super().__init__(message)
        self.stage = stage
        self.paths = list(paths)


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _need(stage, out: Path, *names):
    missing = [str(out / n) for n in names if not (out / n).exists()]
    if missing:
        raise StageError(stage, "missing input artifacts (run the earlier stages first)", missing)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def load_teacher(path):
    data = _read_json(path)
    if data.get("kind") == "classical":
        return ClassicalConfig(**data["optimizer"])
    return TeacherModel.from_json(data)


def _feature_params(source) -> FeatureParams:
    return source.config.feature_params if isinstance(source, TeacherModel) else FeatureParams()


def stage_meta_train(cfg, out: Path) -> None:
    if cfg.teacher.kind == "classical":
        write_json(out / TEACHER, {"kind": "classical", "optimizer": cfg.teacher.to_dict()["optimizer"]})
        return
    model = TeacherModel.init(cfg.teacher.model, seed=cfg.teacher.init_seed)
    tlog = TrainLog()
    trained = meta_train(model, cfg.task, cfg.meta_train, tlog)
    save_checkpoint(trained, out / TEACHER)
    tlog.write_csv(out / CURVE)
    if tlog.stopped_early:
        log.warning("meta-training stopped early: %s", tlog.reason)


def stage_gen_db(cfg, out: Path) -> None:
    _need("gen-db", out, TEACHER)
    source = load_teacher(out / TEACHER)
    d = cfg.db
    db = generate_db(source, cfg.task, n=d.n, seed=d.seed, steps_per_task=d.steps_per_task,
                     coords_per_step=d.coords_per_step, horizon=d.horizon, max_tasks=d.max_tasks)
    db.to_jsonl(out / DB)
    write_json(out / DB_STATS, db.stats())


def _load_db(out: Path) -> TrajectoryDB:
    return TrajectoryDB.from_jsonl(out / DB)


def stage_distill(cfg, out: Path) -> None:
    _need("distill", out, DB)
    db = _load_db(out)
    rep = distill(db, cfg.sr, cfg.select.delta)
    write_json(out / DISTILL, rep.to_json())
    with open(out / FRONT, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["complexity", "r2", "mse", "equation", "equation_scaled"])
        for c in sorted(rep.front.entries):
            e = rep.front.entries[c]
            w.writerow([c, repr(e.r2), repr(e.mse), rep.original_units.get(c, ""), to_sexpr(e.expr)])


def _load_distill(out: Path) -> DistillReport:
    return DistillReport.from_json(_read_json(out / DISTILL))


def stage_metrics(cfg, out: Path) -> None:
    _need("metrics", out, DB, DISTILL)
    db = _load_db(out)
    rep = _load_distill(out)
    res = interp_report(rep.selected, rep.front, db, cfg.select.delta).to_json()
    if cfg.teacher.kind == "classical":
        opt = cfg.teacher.optimizer
        beta = opt.momentum if opt.kind == "momentum" else opt.beta1
        t, m = reference_tpf_mc(opt.kind, beta)
        res["reference"] = {"kind": opt.kind, "beta": beta, "tpf": t, "mc": m}
    write_json(out / METRICS, res)


def stage_tune(cfg, out: Path) -> None:
    _need("tune", out, TEACHER, DISTILL)
    fp = _feature_params(load_teacher(out / TEACHER))
    if cfg.tune.skeleton == "eq6":
        _need("tune", out, DB)
        sk = fit_eq6(_load_db(out), cfg.tune.eq6_lags, cfg.tune.eq6_gamma, fp)
    else:
        sk = skeletonize(_load_distill(out).selected, fp)
    save_skeleton(sk, out / SK_BEFORE)
    tlog = TuneLog()
    tuned = tune(sk, cfg.tune_task, cfg.tune.config, tlog)
    save_skeleton(tuned, out / SK_AFTER)
    write_json(out / TUNE_LOG, tlog.to_json())


def stage_evaluate(cfg, out: Path) -> None:
    _need("evaluate", out, TEACHER, DISTILL)
    teacher = load_teacher(out / TEACHER)
    rep = _load_distill(out)
    ev = cfg.evaluate
    groups = {"eval_task": {"teacher": teacher, "distilled": (rep.selected, _feature_params(teacher))}}
    for b in ev.baselines:
        groups["eval_task"][f"baseline:{b.label()}"] = b
    if (out / SK_BEFORE).exists() and (out / SK_AFTER).exists():
        groups["tune_task"] = {"before": load_skeleton(out / SK_BEFORE), "after": load_skeleton(out / SK_AFTER)}
    summary, rows = {}, []
    for group, opts in groups.items():
        spec = cfg.eval_task if group == "eval_task" else cfg.tune_task
        summary[group] = {}
        for name, opt in opts.items():
            res = evaluate(opt, spec, ev.seeds, ev.steps, label=name)
            summary[group][name] = res.summary()
            for i, traj in enumerate(res.trajectories):
                rows += [(group, name, ev.seeds[i], t, repr(float(v))) for t, v in enumerate(traj)]
    write_json(out / EVAL, summary)
    with open(out / TRAJ, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "optimizer", "seed", "step", "loss"])
        w.writerows(rows)


STAGES = (
    ("meta-train", stage_meta_train, (TEACHER,)),
    ("gen-db", stage_gen_db, (DB, DB_STATS)),
    ("distill", stage_distill, (DISTILL, FRONT)),
    ("metrics", stage_metrics, (METRICS,)),
    ("tune", stage_tune, (SK_BEFORE, SK_AFTER, TUNE_LOG)),
    ("evaluate", stage_evaluate, (EVAL, TRAJ)),
)
STAGE_FUNCS = {name: fn for name, fn, _ in STAGES}


def _run_stage(name, fn, cfg, out: Path) -> None:
    log.info("stage %s -> %s", name, out)
    start = time.perf_counter()
    try:
        fn(cfg, out)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}", [str(out)]) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - start)


def run_pipeline(cfg, out: Path, force: bool = False) -> None:
    """All stages in order; a stage whose artifacts already exist is skipped unless ``force``."""
    for name, fn, products in STAGES:
        if not force and all((out / p).exists() for p in products):
            log.info("stage %s: artifacts present, skipping", name)
            continue
        _run_stage(name, fn, cfg, out)
    write_report(out)


def run_sanity_cmd(cfg, out: Path) -> bool:
    results = run_sanity(cfg.sr, n=cfg.db.n, seed=cfg.db.seed)
    write_json(out / SANITY, {"rows": [r.to_json() | {"seconds": None} for r in results],
                              "passed": all(r.passed for r in results)})
    with open(out / "sanity_times.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "seconds"])
        w.writerows((r.name, f"{r.seconds:.1f}") for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: R2={r.r2:.4f} (floor {r.floor}) "
              f"MC={r.mc} {r.seconds:.0f}s  {r.recovered}")
    return all(r.passed for r in results)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("sanity", "meta-train", "gen-db", "distill", "metrics", "tune", "evaluate", "pipeline", "report"):
        sp = sub.add_parser(name)
        if name == "report":
            sp.add_argument("--out", required=True, help="run directory to render")
            continue
        sp.add_argument("--config", help="JSON run config (defaults when omitted)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="base seed (overrides every stage seed)")
        sp.add_argument("--workers", type=int, help="symbolic-regression worker threads")
        if name == "pipeline":
            sp.add_argument("--force", action="store_true", help="recompute stages whose artifacts exist")
    return p


def _setup_logging():
    level = os.environ.get("SYMDISTILL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            print(write_report(args.out))
        except ReportError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_STAGE
        return EXIT_OK
    try:
        if args.workers is not None and args.workers < 1:
            raise cfgmod.ConfigError("--workers must be >= 1")
        over = {"seed": args.seed, "output_dir": args.out, "workers": args.workers}
        cfg = cfgmod.load(args.config, **over) if args.config else cfgmod.from_dict({}, **over)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved.pop("output_dir")
    write_json(out / "config.json", resolved)
    try:
        if args.command == "sanity":
            return EXIT_OK if run_sanity_cmd(cfg, out) else EXIT_FLOOR
        if args.command == "pipeline":
            run_pipeline(cfg, out, args.force)
        else:
            _run_stage(args.command, STAGE_FUNCS[args.command], cfg, out)
    except StageError as exc:
        print(f"stage {exc.stage} failed: {exc}", file=sys.stderr)
        for p in exc.paths:
            print(f"  {p}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
