"""Temporal Perception Field and Mapping Complexity.

TPF of a stream is the sensitivity-weighted mean lag
``sum_i i*|c_i| / sum_i |c_i|`` where ``c_i`` is the mean absolute
derivative of the equation output w.r.t. the stream's value at lag ``i``
over the database records. For equations linear in the lagged inputs the
``c_i`` are the literal coefficients. MC is the complexity of the equation
picked by :func:`symdistill.distill.select_equation`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distill import TrajectoryDB, select_equation
from .exprtree import Expression, render
from .symreg import ParetoFront


def sensitivities(expr: Expression, db: TrajectoryDB) -> dict:
    """Mean |d out / d input| per stream and lag over the DB's raw records."""
    prog = expr.compile(db.streams)
    with np.errstate(all="ignore"):
        y, _, dX = prog.grad(db.raw_matrix())
    ok = np.isfinite(y) & np.all(np.isfinite(dX), axis=1)
    if not np.any(ok):
        raise ArithmeticError("equation is not finite on any database record")
    mean_abs = np.mean(np.abs(dX[ok]), axis=0)
    T = db.horizon
    return {s: mean_abs[i * T:(i + 1) * T] for i, s in enumerate(db.streams)}


def tpf_from_coefficients(coeffs) -> float | None:
    """Weighted mean lag of a coefficient vector; None when all are zero."""
    c = np.abs(np.asarray(coeffs, dtype=np.float64))
    total = c.sum()
    if total == 0:
        return None
    return float(np.dot(np.arange(c.size), c) / total)


def tpf(expr: Expression, db: TrajectoryDB) -> dict:
    """Per-stream TPF over the streams the equation references; None if insensitive."""
    sens = sensitivities(expr, db)
    used = set(expr.streams)
    return {s: tpf_from_coefficients(v) for s, v in sens.items() if s in used}


def mc(front: ParetoFront, delta: float = 0.05) -> int:
    return select_equation(front, delta)[1]


def reference_tpf_mc(kind: str, beta: float = 0.0) -> tuple:
    """Closed forms: sgd and adam (on mhat) give (0, 1); momentum(beta) gives
    (beta/(1-beta), i0^2/2) with beta^i0 = 0.05."""
    if kind in ("sgd", "adam"):
        return 0.0, 1.0
    if kind != "momentum":
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if beta == 0:
        return 0.0, 1.0
    i0 = math.log(0.05) / math.log(beta)
    return beta / (1 - beta), 0.5 * i0 * i0


@dataclass
class InterpReport:
    tpf: dict
    mc: int
    equation: str
    db_id: str
    notes: list = field(default_factory=list)

    def tpf_tuple(self) -> tuple:
        return tuple(self.tpf[s] for s in sorted(self.tpf))

    def to_json(self) -> dict:
        return {"tpf": self.tpf, "mc": self.mc, "equation": self.equation, "db": self.db_id,
                "notes": self.notes}


def interp_report(expr: Expression, front: ParetoFront, db: TrajectoryDB, delta: float = 0.05) -> InterpReport:
    values = tpf(expr, db)
    notes = ["TPF coefficients are mean absolute input sensitivities over the database"]
    if any(v is None for v in values.values()):
        notes.append("streams with all-zero sensitivity have no TPF")
    return InterpReport(values, mc(front, delta), render(expr), db.fingerprint(), notes)
