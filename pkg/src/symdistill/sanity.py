"""Recovery checks: regress known optimizers from their own update records.

Gradients come from training a small MLP classifier with plain SGD. Each
coordinate's gradient series is divided by its root-mean-square over the
run so all coordinates share one O(1) scale; the five reference rules are
then applied to those normalized series.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .distill import TrajectoryDB, distill, select_equation
from .exprtree import parse, render
from .optimizers import ClassicalConfig, ClassicalState, step_classical
from .symreg import SRConfig
from .tasks import TaskSpec, eval_loss_grad, sample_task

log = logging.getLogger(__name__)

HORIZON = 20
GRADIENT_TASK = TaskSpec(family="mlp_classify", layers=(50, 20), seed=0)

LINEAR_DECAY = " + ".join(f"{1 - 0.1 * i:.1f}*g[{i}]" for i in range(10))


@dataclass(frozen=True)
class SanityRow:
    name: str
    description: str
    floor: float
    expr: str | None = None
    optimizer: ClassicalConfig | None = None


ROWS = (
    SanityRow("sgd", "-0.01*g[t]", 0.999, expr="-0.01*g[0]"),
    SanityRow("linear_decay", "sum_{i<=10} (1-0.1i) g[t-i]", 0.85, expr=LINEAR_DECAY),
    SanityRow("composite", "g[t]^2 + g[t-1] + 2 g[t-2] + exp(g[t-4])", 0.9,
              expr="sq(g[0]) + g[1] + 2*g[2] + exp(g[4])"),
    SanityRow("momentum", "momentum(0.6), lr 0.01", 0.9,
              optimizer=ClassicalConfig("momentum", lr=0.01, momentum=0.6)),
    SanityRow("adam", "Adam(0.9, 0.999), lr 0.01", 0.75,
              optimizer=ClassicalConfig("adam", lr=0.01, beta1=0.9, beta2=0.999)),
)
ROW_NAMES = tuple(r.name for r in ROWS)


def gradient_stream(spec: TaskSpec = GRADIENT_TASK, steps: int = 120, lr: float = 0.1,
                    task_index: int = 0) -> np.ndarray:
    """(steps, d) per-coordinate RMS-normalized gradients from an SGD run."""
    task = sample_task(spec, task_index)
    x = task.x0.copy()
    grads = np.empty((steps, task.dim))
    for t in range(steps):
        _, g = eval_loss_grad(task, x, task.batch(t))
        grads[t] = g
        x -= lr * g
    rms = np.sqrt(np.mean(grads ** 2, axis=0))
    live = rms > 1e-12
    return grads[:, live] / rms[live]


def _rule_outputs(row: SanityRow, grads: np.ndarray) -> np.ndarray:
    steps, d = grads.shape
    out = np.empty((steps, d))
    if row.optimizer is not None:
        st = ClassicalState.zeros(d)
        for t in range(steps):
            out[t] = step_classical(st, grads[t], row.optimizer, t + 1)
        return out
    expr = parse(row.expr, HORIZON)
    prog = expr.compile(("g",))
    padded = np.vstack([np.zeros((HORIZON - 1, d)), grads])
    for t in range(steps):
        window = padded[t:t + HORIZON][::-1].T  # (d, horizon), lag 0 first
        out[t] = prog.eval(np.ascontiguousarray(window))
    return out


def sanity_db(row: SanityRow, n: int = 5000, seed: int = 0, grads: np.ndarray | None = None) -> TrajectoryDB:
    """Sample ``n`` (coordinate, step) records with a full window of history."""
    if grads is None:
        grads = gradient_stream()
    steps, d = grads.shape
    out = _rule_outputs(row, grads)
    eligible = (steps - HORIZON + 1) * d
    if n > eligible:
        raise ValueError(f"only {eligible} eligible records, asked for {n}")
    flat = np.sort(np.random.default_rng([seed, 0x5A7]).choice(eligible, size=n, replace=False))
    t = HORIZON - 1 + flat // d
    coord = flat % d
    lags = t[:, None] - np.arange(HORIZON)[None, :]
    feats = grads[lags, coord[:, None]][:, None, :]
    return TrajectoryDB(("g",), HORIZON, feats, out[t, coord], np.zeros(n, dtype=np.int64), t, coord,
                        f"sanity:{row.name}")


@dataclass
class SanityResult:
    name: str
    target: str
    recovered: str
    recovered_scaled: str
    r2: float
    floor: float
    mc: int
    seconds: float
    report: object = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.r2 >= self.floor

    def to_json(self) -> dict:
        return {"name": self.name, "target": self.target, "recovered": self.recovered,
                "r2": self.r2, "floor": self.floor, "passed": self.passed, "mc": self.mc,
                "seconds": round(self.seconds, 1)}


def run_row(row: SanityRow, sr_config: SRConfig | None = None, n: int = 5000, seed: int = 0,
            grads: np.ndarray | None = None) -> SanityResult:
    """Distill one row; ``recovered`` is the best-R2 entry, ``mc`` uses the default threshold."""
    sr_config = sr_config or SRConfig()
    db = sanity_db(row, n, seed, grads)
    start = time.perf_counter()
    report = distill(db, sr_config)
    seconds = time.perf_counter() - start
    best, _ = select_equation(report.front, 0.0)
    result = SanityResult(row.name, row.description, render(db.to_original_units(best.expr)),
                          render(best.expr), best.r2, row.floor, report.mc, seconds, report)
    log.info("sanity %s: r2=%.4f (floor %.2f) mc=%d %.0fs", row.name, best.r2, row.floor, report.mc, seconds)
    return result


def run_sanity(sr_config: SRConfig | None = None, rows=None, n: int = 5000, seed: int = 0) -> list:
    grads = gradient_stream()
    chosen = [r for r in ROWS if rows is None or r.name in rows]
    return [run_row(r, sr_config, n, seed, grads) for r in chosen]
