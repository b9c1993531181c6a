"""Trajectory databases and distillation of update rules into equations.

Features are stored raw. For regression every stream is divided by its
standard deviation over all records and lags, and the target by its own
standard deviation; the selected equation is folded back into raw units.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exprtree import DEFAULT_HORIZON, Expression, parse_sexpr, render, rescale_variables, to_sexpr
from .l2o_teacher import TeacherModel, TeacherRule
from .optimizers import ClassicalConfig
from .rollout import ClassicalRule, FeatureSource, History, run_rule
from .symreg import Individual, ParetoFront, RegressionData, SRConfig, fit
from .tasks import TaskSpec, sample_task

log = logging.getLogger(__name__)

DB_TASK_OFFSET = 2_000_000


class DBError(RuntimeError):
    pass


@dataclass
class TrajectoryDB:
    streams: tuple
    horizon: int
    features: np.ndarray  # (n, n_streams, horizon), raw values, lag 0 first
    out: np.ndarray
    task: np.ndarray
    t: np.ndarray
    coord: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.out = np.asarray(self.out, dtype=np.float64)
        n = self.out.shape[0]
        if self.features.shape != (n, len(self.streams), self.horizon):
            raise ValueError(f"features shape {self.features.shape} inconsistent with "
                             f"{n} records x {len(self.streams)} streams x horizon {self.horizon}")
        self.task = np.asarray(self.task, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.coord = np.asarray(self.coord, dtype=np.int64)

    def __len__(self):
        return self.out.shape[0]

    @property
    def scales(self) -> dict:
        out = {}
        for i, s in enumerate(self.streams):
            sd = float(np.std(self.features[:, i, :]))
            out[s] = sd if sd > 0 and math.isfinite(sd) else 1.0
        return out

    @property
    def out_scale(self) -> float:
        sd = float(np.std(self.out))
        return sd if sd > 0 and math.isfinite(sd) else 1.0

    def raw_matrix(self) -> np.ndarray:
        return self.features.reshape(len(self), -1).copy()

    def scaled_matrix(self) -> np.ndarray:
        sc = np.array([self.scales[s] for s in self.streams])
        return (self.features / sc[None, :, None]).reshape(len(self), -1)

    def scaled_out(self) -> np.ndarray:
        return self.out / self.out_scale

    def regression_data(self, val_fraction: float = 0.2, seed: int = 0) -> RegressionData:
        if len(self) == 0:
            raise DBError("empty database")
        return RegressionData.from_arrays(self.scaled_matrix(), self.scaled_out(), self.streams,
                                          self.horizon, val_fraction, seed)

    def to_original_units(self, expr: Expression) -> Expression:
        """Fold the stream and output scales into an equation fitted on scaled data."""
        return rescale_variables(expr, self.scales, self.out_scale)

    # ---- serialization ----

    def _lines(self):
        for i in range(len(self)):
            rec = {"task": int(self.task[i]), "t": int(self.t[i]), "coord": int(self.coord[i]),
                   "streams": {s: [float(v) for v in self.features[i, k]] for k, s in enumerate(self.streams)},
                   "out": float(self.out[i])}
            yield json.dumps(rec, sort_keys=True)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self._lines():
                fh.write(line + "\n")

    @classmethod
    def from_jsonl(cls, path, horizon: int | None = None, source: str = "") -> "TrajectoryDB":
        feats, out, task, t, coord = [], [], [], [], []
        streams = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if streams is None:
                    streams = tuple(rec["streams"])
                if tuple(rec["streams"]) != streams:
                    raise DBError(f"{path}:{lineno}: stream set differs from first record")
                feats.append([rec["streams"][s] for s in streams])
                out.append(rec["out"])
                task.append(rec["task"])
                t.append(rec["t"])
                coord.append(rec.get("coord", -1))
        if streams is None:
            raise DBError(f"{path}: empty database")
        arr = np.asarray(feats, dtype=np.float64)
        if horizon is not None and arr.shape[2] != horizon:
            raise DBError(f"{path}: windows have {arr.shape[2]} lags, expected {horizon}")
        return cls(streams, arr.shape[2], arr, out, task, t, coord, source)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for line in self._lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def stats(self) -> dict:
        return {"records": len(self), "streams": list(self.streams), "horizon": self.horizon,
                "tasks": int(np.unique(self.task).size),
                "scales": self.scales, "out_scale": self.out_scale,
                "out_mean": float(np.mean(self.out)) if len(self) else 0.0,
                "fingerprint": self.fingerprint()}


def make_rule(source):
    if isinstance(source, ClassicalConfig):
        return ClassicalRule(source)
    if isinstance(source, TeacherModel):
        return TeacherRule(source)
    if hasattr(source, "step") and hasattr(source, "reset"):
        return source
    raise TypeError(f"cannot build an update rule from {type(source).__name__}")


def describe_source(source) -> str:
    rule = make_rule(source)
    return rule.describe() if hasattr(rule, "describe") else type(rule).__name__


def generate_db(source, task_spec: TaskSpec, n: int = 5000, seed: int = 0, steps_per_task: int = 100,
                coords_per_step: int = 8, horizon: int = DEFAULT_HORIZON, streams=None,
                max_tasks: int = 1000) -> TrajectoryDB:
    """Run ``source`` on fresh tasks, sampling (coordinate, step) records after a burn-in.

    Steps ``t >= horizon - 1`` are eligible, so every lag holds a real value.
    Records from a task whose run diverges are discarded.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if steps_per_task < horizon:
        raise ValueError("steps_per_task must be at least the horizon")
    rule = make_rule(source)
    streams = tuple(streams) if streams is not None else tuple(rule.streams)
    rng = np.random.default_rng([seed, 0xDB])
    feats, outs, tasks, ts, coords = [], [], [], [], []
    count, diverged = 0, 0
    source_feats = FeatureSource(getattr(getattr(source, "config", None), "feature_params", None))
    for k in range(max_tasks):
        if count >= n:
            break
        index = DB_TASK_OFFSET + seed * 100_000 + k
        task = sample_task(task_spec, index)
        hist = History(task.dim, streams, horizon)
        source_feats.reset(task.dim)
        local = []

        def on_step(t, grad, fs, delta):
            extra = fs
            if any(s not in fs for s in streams):
                extra = dict(source_feats.step(grad))
                extra.update(fs)
            else:
                source_feats.step(grad)
            hist.push(extra)
            if t >= horizon - 1:
                m = min(coords_per_step, task.dim)
                pick = np.sort(rng.choice(task.dim, size=m, replace=False))
                local.append((t, pick, hist.buf[pick].copy(), np.asarray(delta)[pick].copy()))

        traj = run_rule(rule, task, steps_per_task, on_step)
        if traj.diverged:
            diverged += 1
            continue
        for t, pick, window, delta in local:
            take = min(len(pick), n - count)
            if take <= 0:
                break
            feats.append(window[:take])
            outs.append(delta[:take])
            tasks.append(np.full(take, index))
            ts.append(np.full(take, t))
            coords.append(pick[:take])
            count += take
    if count == 0:
        raise DBError(f"optimizer diverged on all {diverged} sampled tasks; no records collected")
    if count < n:
        log.warning("collected %d of %d records (%d diverged tasks)", count, n, diverged)
    return TrajectoryDB(streams, horizon, np.concatenate(feats), np.concatenate(outs),
                        np.concatenate(tasks), np.concatenate(ts), np.concatenate(coords),
                        describe_source(source))


def replay_output(source, task_spec: TaskSpec, task_index: int, t: int, coord: int) -> float:
    """Re-run ``source`` on the logged task up to step ``t``; return its update at ``coord``."""
    rule = make_rule(source)
    task = sample_task(task_spec, task_index)
    found = {}

    def on_step(step, grad, fs, delta):
        if step == t:
            found["v"] = float(np.asarray(delta)[coord])

    run_rule(rule, task, t + 1, on_step)
    return found["v"]


# --------------------------------------------------------------------------
# selection and reports
# --------------------------------------------------------------------------

def select_equation(front: ParetoFront, delta: float = 0.05) -> tuple:
    """Minimum-complexity entry with r2 >= max_r2 - delta; returns (Individual, MC)."""
    entries = front.pruned() if len(front) else []
    if not entries:
        raise ValueError("empty front")
    best = max(e.r2 for e in entries)
    chosen = min((e for e in entries if e.r2 >= best - delta), key=lambda e: e.complexity)
    return chosen, chosen.complexity


@dataclass
class DistillReport:
    front: ParetoFront
    selected: Expression
    selected_scaled: Expression
    selected_r2: float
    selected_complexity: int
    teacher_id: str
    db_fingerprint: str
    delta: float = 0.05
    original_units: dict = field(default_factory=dict)

    @property
    def mc(self) -> int:
        return self.selected_complexity

    def to_json(self) -> dict:
        return {
            "teacher": self.teacher_id,
            "db_fingerprint": self.db_fingerprint,
            "delta_r2": self.delta,
            "selected": {"expr_infix": render(self.selected), "expr_sexpr": to_sexpr(self.selected),
                         "scaled_infix": render(self.selected_scaled),
                         "r2": self.selected_r2, "complexity": self.selected_complexity},
            "front": self.front.to_json(lambda e: {"original_infix": self.original_units.get(e.complexity, "")}),
        }

    @classmethod
    def from_json(cls, data: dict, horizon: int = DEFAULT_HORIZON) -> "DistillReport":
        front = ParetoFront.from_json(data["front"], horizon)
        sel = data["selected"]
        scaled = next((e.expr for c, e in front.entries.items() if c == sel["complexity"]), None)
        return cls(front, parse_sexpr(sel["expr_sexpr"], horizon), scaled, float(sel["r2"]),
                   int(sel["complexity"]), data["teacher"], data["db_fingerprint"], float(data["delta_r2"]),
                   {int(r["complexity"]): r.get("original_infix", "") for r in data["front"]})


def distill(db: TrajectoryDB, sr_config: SRConfig | None = None, delta: float = 0.05,
            teacher_id: str | None = None, progress=None) -> DistillReport:
    sr_config = sr_config or SRConfig()
    if len(db) > sr_config.db_size:
        db = subsample(db, sr_config.db_size, sr_config.seed)
    front = fit(db, sr_config, progress=progress)
    chosen, mc = select_equation(front, delta)
    units = {c: render(db.to_original_units(e.expr)) for c, e in front.entries.items()}
    return DistillReport(front, db.to_original_units(chosen.expr), chosen.expr, chosen.r2, mc,
                         teacher_id if teacher_id is not None else db.source, db.fingerprint(), delta, units)


def subsample(db: TrajectoryDB, n: int, seed: int = 0) -> TrajectoryDB:
    idx = np.sort(np.random.default_rng([seed, 0x5AB]).choice(len(db), size=n, replace=False))
    return TrajectoryDB(db.streams, db.horizon, db.features[idx], db.out[idx], db.task[idx],
                        db.t[idx], db.coord[idx], db.source)


def best_entry(front: ParetoFront) -> Individual:
    return select_equation(front, 0.0)[0]
