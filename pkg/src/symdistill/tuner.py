"""Skeletons of distilled equations, their meta-fine-tuning, and evaluation.

A skeleton keeps an equation's structure and exposes its constants as a
trainable vector ``theta``. Each constant leaf maps to one ``theta`` entry
(several leaves may share an entry, as the thresholds ``gamma`` of the
tanh form do). When the equation reads the ``nhat`` stream, the six
feature parameters ``k1, k2, l1, l2, alpha1, alpha2`` are appended to
``theta``.

The tanh form is ``sum_{s, tau} W[s, tau] * gamma * tanh(s[tau] / gamma)``;
the overall minus sign is absorbed into ``W``.

Tuning minimizes the same detached unrolled objective as teacher
meta-training: with ``x_{t+1} = x_t + delta_t(theta)`` and the inputs
treated as constants w.r.t. ``x``, ``dL/dtheta = sum_s J_s^T a_s`` with
``a_s = sum_{t>s} w_t grad f(x_t)`` and ``J_s = d delta_s / d theta``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exprtree import (
    DEFAULT_HORIZON, Const, Expression, Op, Var, iter_nodes, parse_sexpr, render, to_sexpr,
)
from .l2o_teacher import AdamState, TeacherModel, TeacherRule
from .optimizers import FEATURE_PARAM_NAMES, ClassicalConfig, FeatureParams
from .rollout import ClassicalRule, FeatureSource, History, run_rule
from .tasks import TaskSpec, eval_loss_grad, sample_task

log = logging.getLogger(__name__)

EVAL_TASK_OFFSET = 1_000_000
TUNE_TASK_OFFSET = 3_000_000
VAL_TASK_OFFSET = 4_000_000
MIN_GAMMA = 1e-3


# --------------------------------------------------------------------------
# skeletons
# --------------------------------------------------------------------------

@dataclass
class Skeleton:
    template: Expression
    slots: np.ndarray
    theta: np.ndarray
    names: tuple
    feature_params: FeatureParams = field(default_factory=FeatureParams)
    kind: str = "generic"

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.int64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.names = tuple(self.names)
        if self.slots.size != len(self.template.constants):
            raise ValueError("one slot per constant leaf required")
        if len(self.names) != self.theta.size:
            raise ValueError("one name per theta entry required")
        for i in self.gamma_indices:
            if self.theta[i] == 0:
                raise ValueError("gamma must be non-zero")

    @property
    def tune_features(self) -> bool:
        return "nhat" in self.template.streams

    @property
    def n_const(self) -> int:
        return self.theta.size - (6 if self.tune_features else 0)

    @property
    def gamma_indices(self) -> list:
        return [i for i, n in enumerate(self.names) if n == "gamma"]

    def constants(self, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return theta[self.slots]

    def params(self, theta=None) -> FeatureParams:
        theta = self.theta if theta is None else theta
        if not self.tune_features:
            return self.feature_params
        return self.feature_params.with_vector(theta[self.n_const:])

    def instantiate(self, theta=None) -> tuple:
        """(Expression, FeatureParams) for ``theta`` (default: current values)."""
        return self.template.with_constants(self.constants(theta)), self.params(theta)

    def with_theta(self, theta) -> "Skeleton":
        return Skeleton(self.template, self.slots, np.array(theta, dtype=np.float64), self.names,
                        self.feature_params, self.kind)

    def w_matrix(self) -> tuple:
        """(streams, W) with W[s, lag] for the tanh form; absent terms are 0."""
        if self.kind != "eq6":
            raise ValueError("only tanh-form skeletons have a W matrix")
        cells = [(i, *n[2:-1].split(",")) for i, n in enumerate(self.names) if n.startswith("W[")]
        streams = tuple(dict.fromkeys(s for _, s, _ in cells))
        W = np.zeros((len(streams), max(int(lag) for *_, lag in cells) + 1))
        for i, s, lag in cells:
            W[streams.index(s), int(lag)] = self.theta[i]
        return streams, W

    def to_json(self) -> dict:
        return {"template_sexpr": to_sexpr(self.template), "template_infix": render(self.template),
                "horizon": self.template.horizon, "slots": [int(s) for s in self.slots],
                "theta": [float(v) for v in self.theta], "names": list(self.names),
                "feature_params": asdict(self.feature_params), "kind": self.kind}

    @classmethod
    def from_json(cls, data: dict) -> "Skeleton":
        tmpl = parse_sexpr(data["template_sexpr"], data.get("horizon", DEFAULT_HORIZON))
        return cls(tmpl, data["slots"], data["theta"], data["names"],
                   FeatureParams(**data["feature_params"]), data.get("kind", "generic"))


def eq6_expression(streams, W, gamma: float = 1.0, horizon: int = DEFAULT_HORIZON) -> Expression:
    """``sum_{s,tau} W[s,tau] * gamma * tanh(s[tau]/gamma)`` over all entries of ``W``."""
    W = np.asarray(W, dtype=np.float64)
    terms = []
    for i, s in enumerate(streams):
        for lag in range(W.shape[1]):
            inner = Op("tanh", (Op("div", (Var(s, lag), Const(gamma))),))
            terms.append(Op("mul", (Const(W[i, lag]), Op("mul", (Const(gamma), inner)))))
    root = terms[0]
    for t in terms[1:]:
        root = Op("add", (root, t))
    return Expression(root, horizon)


def _eq6_terms(node):
    if isinstance(node, Op) and node.kind == "add":
        out = []
        for c in node.children:
            sub = _eq6_terms(c)
            if sub is None:
                return None
            out.extend(sub)
        return out
    # mul(W, mul(gamma, tanh(div(var, gamma))))
    if not (isinstance(node, Op) and node.kind == "mul" and isinstance(node.children[0], Const)):
        return None
    inner = node.children[1]
    if not (isinstance(inner, Op) and inner.kind == "mul" and isinstance(inner.children[0], Const)):
        return None
    th = inner.children[1]
    if not (isinstance(th, Op) and th.kind == "tanh"):
        return None
    dv = th.children[0]
    if not (isinstance(dv, Op) and dv.kind == "div" and isinstance(dv.children[0], Var)
            and isinstance(dv.children[1], Const)):
        return None
    return [(node.children[0].value, inner.children[0].value, dv.children[1].value, dv.children[0])]


def skeletonize(expr: Expression, feature_params: FeatureParams | None = None) -> Skeleton:
    """Turn every constant leaf into a trainable slot; detect the tanh form."""
    feature_params = feature_params or FeatureParams()
    terms = _eq6_terms(expr.root)
    extra_names = list(FEATURE_PARAM_NAMES) if "nhat" in expr.streams else []
    extra = list(feature_params.vector()) if extra_names else []
    if terms:
        gammas = {g for _, g1, g2, _ in terms for g in (g1, g2)}
        keys = [(v.stream, v.lag) for *_, v in terms]
        if len(gammas) == 1 and len(set(keys)) == len(keys) and 0 not in gammas:
            gamma = gammas.pop()
            slots, names, theta = [], [], []
            g_idx = len(terms)
            for k, (w, _, _, v) in enumerate(terms):
                slots += [k, g_idx, g_idx]
                names.append(f"W[{v.stream},{v.lag}]")
                theta.append(w)
            names.append("gamma")
            theta.append(gamma)
            return Skeleton(expr, slots, theta + extra, names + extra_names, feature_params, "eq6")
    consts = list(expr.constants)
    return Skeleton(expr, list(range(len(consts))), consts + extra,
                    [f"c{i}" for i in range(len(consts))] + extra_names, feature_params, "generic")


def eq6_skeleton(streams, lags: int, W=None, gamma: float = 1.0,
                 feature_params: FeatureParams | None = None, horizon: int = DEFAULT_HORIZON) -> Skeleton:
    W = np.zeros((len(streams), lags + 1)) if W is None else np.asarray(W, dtype=np.float64)
    return skeletonize(eq6_expression(streams, W, gamma, horizon), feature_params)


def fit_eq6(db, lags: int = 5, gamma: float = 1.0, feature_params: FeatureParams | None = None) -> Skeleton:
    """Least-squares W for the tanh form on a trajectory database (raw units)."""
    T = lags + 1
    cols = [gamma * np.tanh(db.features[:, i, :T] / gamma) for i in range(len(db.streams))]
    A = np.concatenate(cols, axis=1)
    w = np.linalg.lstsq(A, db.out, rcond=None)[0]
    return eq6_skeleton(db.streams, lags, w.reshape(len(db.streams), T), gamma, feature_params, db.horizon)


# --------------------------------------------------------------------------
# equation-driven update rule
# --------------------------------------------------------------------------

class EquationRule:
    """``delta = expr(window)`` over lagged features; early lags are zero."""

    def __init__(self, expr: Expression, feature_params: FeatureParams | None = None):
        self.expr = expr
        self.streams = expr.streams or ("g",)
        self.prog = expr.compile(self.streams)
        self.source = FeatureSource(feature_params)
        self.hist = None

    def reset(self, d: int) -> None:
        self.source.reset(d)
        self.hist = History(d, self.streams, self.expr.horizon)

    def step(self, grad):
        feats = self.source.step(grad)
        self.hist.push(feats)
        with np.errstate(all="ignore"):
            delta = self.prog.eval(self.hist.matrix())
        return delta, feats

    def describe(self) -> str:
        return f"equation:{render(self.expr)}"


def as_rule(optimizer):
    if isinstance(optimizer, ClassicalConfig):
        return ClassicalRule(optimizer)
    if isinstance(optimizer, TeacherModel):
        return TeacherRule(optimizer)
    if isinstance(optimizer, Skeleton):
        return EquationRule(*optimizer.instantiate())
    if isinstance(optimizer, Expression):
        return EquationRule(optimizer)
    if isinstance(optimizer, tuple) and len(optimizer) == 2 and isinstance(optimizer[0], Expression):
        return EquationRule(*optimizer)
    if hasattr(optimizer, "step") and hasattr(optimizer, "reset"):
        return optimizer
    raise TypeError(f"cannot evaluate optimizer of type {type(optimizer).__name__}")


# --------------------------------------------------------------------------
# unrolled objective and its gradient
# --------------------------------------------------------------------------

class SkeletonState:
    def __init__(self, sk: Skeleton, tasks, theta):
        self.tasks = list(tasks)
        self.offsets = np.cumsum([0] + [t.dim for t in self.tasks])
        n = int(self.offsets[-1])
        self.x = np.concatenate([t.x0 for t in self.tasks])
        self.streams = sk.template.streams or ("g",)
        self.source = FeatureSource(sk.params(theta), tangents=sk.tune_features)
        self.source.reset(n)
        T = sk.template.horizon
        self.hist = History(n, self.streams, T)
        self.dn_hist = np.zeros((6, n, T)) if sk.tune_features else None
        self.step = 0

    def loss_grad(self):
        losses, grads = [], []
        for k, task in enumerate(self.tasks):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            loss, g = eval_loss_grad(task, self.x[lo:hi], task.batch(self.step))
            losses.append(loss)
            grads.append(g)
        return np.array(losses), np.concatenate(grads)


def skeleton_segment(sk: Skeleton, state: SkeletonState, weights, theta=None, replay=None, record=None):
    """Run one segment; return (sum_t w_t sum_tasks f(x_t), dL/dtheta).

    ``replay`` (list of gradient arrays) drives the feature construction in
    place of the live gradients, so a finite-difference oracle can perturb
    ``theta`` while holding the detached inputs fixed.
    """
    theta = sk.theta if theta is None else np.asarray(theta, dtype=np.float64)
    consts = sk.constants(theta)
    prog = sk.template.compile(state.streams)
    T = sk.template.horizon
    n_theta = theta.size
    jacs, grads_f = [], []
    total = 0.0
    nhat_block = state.streams.index("nhat") if sk.tune_features else None
    for k, w in enumerate(weights):
        losses, g = state.loss_grad()
        total += w * losses.sum()
        grads_f.append(g)
        drive = g if replay is None else replay[k]
        if record is not None:
            record.append(g.copy())
        feats = state.source.step(drive)
        state.hist.push(feats)
        with np.errstate(all="ignore"):
            delta, dc, dX = prog.grad(state.hist.matrix(), consts)
        J = np.zeros((delta.size, n_theta))
        np.add.at(J.T, sk.slots, dc.T)
        if sk.tune_features:
            state.dn_hist[:, :, 1:] = state.dn_hist[:, :, :-1]
            state.dn_hist[:, :, 0] = state.source.state.dnhat
            dXn = dX[:, nhat_block * T:(nhat_block + 1) * T]
            J[:, sk.n_const:] = np.einsum("nt,pnt->np", dXn, state.dn_hist)
        jacs.append(J)
        state.x = state.x + delta
        state.step += 1
    grad = np.zeros(n_theta)
    adj = np.zeros(state.x.size)
    for k in range(len(weights) - 1, -1, -1):
        grad += jacs[k].T @ adj
        adj = adj + weights[k] * grads_f[k]
    return float(total), grad


def skeleton_loss(sk: Skeleton, tasks, weights, theta=None, segments: int = 1):
    theta = sk.theta if theta is None else theta
    state = SkeletonState(sk, tasks, theta)
    total, grad = 0.0, np.zeros(np.size(theta))
    for _ in range(segments):
        loss, g = skeleton_segment(sk, state, weights, theta)
        total += loss
        grad += g
    return total, grad


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalResult:
    label: str
    mean: float
    std: float
    finals: list
    diverged: list
    trajectories: np.ndarray

    @property
    def n_diverged(self) -> int:
        return int(sum(self.diverged))

    def summary(self) -> dict:
        return {"optimizer": self.label, "mean": self.mean, "std": self.std,
                "finals": self.finals, "diverged": self.diverged, "n_diverged": self.n_diverged}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "step", "loss"])
            for i, traj in enumerate(self.trajectories):
                for t, v in enumerate(traj):
                    w.writerow([i, t, repr(float(v))])


def _label(optimizer) -> str:
    rule = as_rule(optimizer)
    return rule.describe() if hasattr(rule, "describe") else type(rule).__name__


def evaluate(optimizer, task_spec: TaskSpec, seeds, steps: int, label: str | None = None) -> EvalResult:
    """Final full-objective loss (mean, std over non-divergent runs) and per-step losses.

    Seed ``s`` is task ``sample_task(task_spec, EVAL_TASK_OFFSET + s)``.
    """
    seeds = list(seeds)
    finals, flags, trajs = [], [], []
    for s in seeds:
        rule = as_rule(optimizer)
        traj = run_rule(rule, sample_task(task_spec, EVAL_TASK_OFFSET + int(s)), steps)
        flags.append(bool(traj.diverged))
        finals.append(float(traj.final_loss) if not traj.diverged else math.nan)
        trajs.append(np.append(traj.losses, traj.final_loss))
    ok = [f for f, d in zip(finals, flags) if not d]
    mean = float(np.mean(ok)) if ok else math.nan
    std = float(np.std(ok)) if ok else math.nan
    if any(flags):
        log.info("%d of %d evaluation runs diverged and are excluded", sum(flags), len(flags))
    return EvalResult(label or _label(optimizer), mean, std, finals, flags, np.array(trajs))


# --------------------------------------------------------------------------
# tuning
# --------------------------------------------------------------------------

@dataclass
class TuneConfig:
    steps: int = 50
    unroll: int = 20
    segments: int = 5
    method: str = "analytic"
    lr: float = 1e-3
    tasks_per_step: int = 2
    spsa_c: float = 1e-3
    val_tasks: int = 4
    val_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.method not in ("analytic", "spsa"):
            raise ValueError(f"unknown tuning method {self.method!r}")
        if self.unroll < 1 or self.segments < 1 or self.tasks_per_step < 1:
            raise ValueError("unroll, segments and tasks_per_step must be positive")


@dataclass
class TuneLog:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_step: int = 0
    stopped_early: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _val_loss(sk: Skeleton, theta, task_spec, cfg: TuneConfig) -> float:
    cand = sk.with_theta(theta)
    finals = []
    for i in range(cfg.val_tasks):
        traj = run_rule(as_rule(cand), sample_task(task_spec, VAL_TASK_OFFSET + cfg.seed * 1000 + i),
                        cfg.unroll * cfg.segments)
        if traj.diverged:
            return math.inf
        finals.append(traj.final_loss)
    return float(np.mean(finals))


def _guard_gamma(sk: Skeleton, theta):
    for i in sk.gamma_indices:
        if abs(theta[i]) < MIN_GAMMA:
            theta[i] = math.copysign(MIN_GAMMA, theta[i] if theta[i] != 0 else 1.0)
    return theta


def tune(skeleton: Skeleton, task_spec: TaskSpec, cfg: TuneConfig, log_out: TuneLog | None = None) -> Skeleton:
    """Adam (or SPSA) on the unrolled objective; returns the best-validated theta."""
    tlog = log_out if log_out is not None else TuneLog()
    if cfg.steps == 0:
        return skeleton.with_theta(skeleton.theta.copy())
    theta = skeleton.theta.copy()
    opt = AdamState.zeros(theta.size, cfg.lr)
    weights = np.ones(cfg.unroll)
    norm = weights.sum() * cfg.tasks_per_step
    best_theta, best_val = theta.copy(), _val_loss(skeleton, theta, task_spec, cfg)
    tlog.val.append((0, best_val))
    rng = np.random.default_rng([cfg.seed, 0x7E])
    for step in range(1, cfg.steps + 1):
        tasks = [sample_task(task_spec, TUNE_TASK_OFFSET + cfg.seed * 100_000 + step * cfg.tasks_per_step + k)
                 for k in range(cfg.tasks_per_step)]
        if cfg.method == "analytic":
            state = SkeletonState(skeleton, tasks, theta)
            seg = []
            for _ in range(cfg.segments):
                loss, grad = skeleton_segment(skeleton, state, weights, theta)
                if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                    tlog.stopped_early = True
                    break
                seg.append(loss / norm)
                theta = _guard_gamma(skeleton, theta + opt.step(grad / norm))
                state.source.params = skeleton.params(theta)
            if tlog.stopped_early:
                log.warning("tuning step %d diverged; keeping best-so-far parameters", step)
                break
            tlog.train.append((step, float(np.mean(seg))))
        else:
            delta = rng.choice([-1.0, 1.0], size=theta.size)
            scale = cfg.spsa_c * np.maximum(np.abs(theta), 1.0)
            lp, _ = skeleton_loss(skeleton, tasks, weights, _guard_gamma(skeleton, theta + scale * delta), cfg.segments)
            lm, _ = skeleton_loss(skeleton, tasks, weights, _guard_gamma(skeleton, theta - scale * delta), cfg.segments)
            if not (math.isfinite(lp) and math.isfinite(lm)):
                tlog.stopped_early = True
                break
            grad = (lp - lm) / (2 * scale * delta)
            theta = _guard_gamma(skeleton, theta + opt.step(grad / norm))
            tlog.train.append((step, float(0.5 * (lp + lm) / norm)))
        if step % cfg.val_every == 0 or step == cfg.steps:
            val = _val_loss(skeleton, theta, task_spec, cfg)
            tlog.val.append((step, val))
            if val < best_val:
                best_val, best_theta, tlog.best_step = val, theta.copy(), step
    return skeleton.with_theta(best_theta)


def save_skeleton(sk: Skeleton, path) -> None:
    with open(path, "w") as fh:
        json.dump(sk.to_json(), fh, indent=1, sort_keys=True)


def load_skeleton(path) -> Skeleton:
    with open(path) as fh:
        return Skeleton.from_json(json.load(fh))
