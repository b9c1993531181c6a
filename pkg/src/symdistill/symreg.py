"""Genetic-programming symbolic regression with a best-per-complexity archive.

Search loop per iteration: every child slot ``i`` draws its own generator
``default_rng([seed, iteration, i])``, picks a parent by tournament on
``fitness = train_mse/var(y) + parsimony*complexity``, applies one mutation,
optionally refines constants, and is scored on the train and validation
splits. Children are merged into the archive in slot order, so the result
depends only on the seed (and not on how slots are spread over workers).
The next population is the elite tenth of the old one, the current pruned
front, and the children.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .exprtree import (
    BINARY_OPS, HYPERBOLIC_OPS, OPERATORS, UNARY_OPS, Const, Expression, Op, Var,
    complexity, depth, iter_paths, node_at, parse_sexpr, render, replace_at, to_sexpr,
)

log = logging.getLogger(__name__)

MUTATIONS = ("replace_operator", "perturb_constant", "insert_unary", "insert_binary",
             "replace_subtree", "delete_node", "swap_subtrees", "crossover")

DEFAULT_MUTATION_WEIGHTS = {
    "replace_operator": 1.0,
    "perturb_constant": 2.0,
    "insert_unary": 0.5,
    "insert_binary": 2.0,
    "replace_subtree": 1.0,
    "delete_node": 1.5,
    "swap_subtrees": 0.3,
    "crossover": 1.0,
}


class SRError(RuntimeError):
    pass


@dataclass
class SRConfig:
    iterations: int = 300
    population: int = 200
    db_size: int = 5000
    max_lag: int = 20
    max_complexity: int = 200
    max_depth: int = 12
    operator_subset: tuple | None = None
    tournament_size: int = 5
    mutation_weights: dict = field(default_factory=lambda: dict(DEFAULT_MUTATION_WEIGHTS))
    const_opt_steps: int = 8
    const_opt_prob: float = 0.25
    const_opt_rows: int = 1024
    parsimony: float = 1e-4
    retries: int = 20
    val_fraction: float = 0.2
    elite_fraction: float = 0.1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_lag < 1:
            raise ValueError("max_lag must be >= 1")
        if self.operator_subset is not None:
            self.operator_subset = tuple(self.operator_subset)
            unknown = set(self.operator_subset) - set(OPERATORS)
            if unknown:
                raise ValueError(f"unknown operators {sorted(unknown)}")
        unknown = set(self.mutation_weights) - set(MUTATIONS)
        if unknown:
            raise ValueError(f"unknown mutations {sorted(unknown)}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def operators(self) -> tuple:
        return tuple(OPERATORS) if self.operator_subset is None else self.operator_subset

    @classmethod
    def without_hyperbolic(cls, **kw) -> "SRConfig":
        return cls(operator_subset=tuple(k for k in OPERATORS if k not in HYPERBOLIC_OPS), **kw)


@dataclass(frozen=True)
class Split:
    X: np.ndarray
    y: np.ndarray
    var: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "var", float(np.var(self.y)) if self.y.size else 0.0)

    def head(self, n: int) -> "Split":
        return self if self.y.size <= n else Split(self.X[:n], self.y[:n])


@dataclass(frozen=True)
class RegressionData:
    train: Split
    val: Split
    streams: tuple
    horizon: int

    @classmethod
    def from_arrays(cls, X, y, streams, horizon, val_fraction=0.2, seed=0) -> "RegressionData":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        n = X.shape[0]
        if n == 0:
            raise SRError("empty database")
        perm = np.random.default_rng([seed, 0x5B1]).permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        if n_val == 0:
            val_idx = tr_idx
        return cls(Split(X[tr_idx], y[tr_idx]), Split(X[val_idx], y[val_idx]), tuple(streams), horizon)


@dataclass(frozen=True)
class Individual:
    expr: Expression
    mse: float
    r2: float
    complexity: int
    train_mse: float = math.inf
    fitness: float = math.inf

    @property
    def valid(self) -> bool:
        return math.isfinite(self.train_mse) and math.isfinite(self.mse)

    @property
    def key(self) -> str:
        return render(self.expr)


# --------------------------------------------------------------------------
# scoring and constant refinement
# --------------------------------------------------------------------------

def _r2(mse, var):
    if var > 0:
        return 1.0 - mse / var
    return 1.0 if mse == 0 else 0.0


def score(expr: Expression, split: Split, streams=None) -> tuple:
    """(mse, r2) on a split; (inf, -inf) when any prediction is non-finite."""
    prog = expr.compile(streams if streams is not None else expr.streams)
    with np.errstate(all="ignore"):
        pred = prog.eval(split.X)
        if not np.all(np.isfinite(pred)):
            return math.inf, -math.inf
        mse = float(np.mean((pred - split.y) ** 2))
    if not math.isfinite(mse):
        return math.inf, -math.inf
    return mse, _r2(mse, split.var)


def optimize_constants(expr: Expression, train: Split, streams=None, steps: int = 20) -> Expression:
    """Levenberg-Marquardt on train MSE; a step is kept only if MSE drops."""
    if not expr.constants:
        return expr
    prog = expr.compile(streams if streams is not None else expr.streams)
    c = np.asarray(expr.constants, dtype=np.float64)
    y = train.y

    def loss(cv):
        with np.errstate(all="ignore"):
            pred = prog.eval(train.X, cv)
            val = float(np.mean((pred - y) ** 2))
        return val if math.isfinite(val) else math.inf

    best = loss(c)
    if not math.isfinite(best):
        return expr
    lam = 0.0
    for _ in range(steps):
        with np.errstate(all="ignore"):
            pred, J, _ = prog.grad(train.X, c)
        r = pred - y
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r))):
            break
        with np.errstate(all="ignore"):
            JtJ = J.T @ J
            Jtr = J.T @ r
        if not (np.all(np.isfinite(JtJ)) and np.all(np.isfinite(Jtr))):
            break
        improved = False
        for _ in range(8):
            A = JtJ + lam * (np.diag(np.diag(JtJ)) + 1e-12 * np.eye(c.size))
            if not np.all(np.isfinite(A)):
                break
            try:
                delta = np.linalg.lstsq(A, -Jtr, rcond=None)[0]
            except np.linalg.LinAlgError:
                break
            trial = c + delta
            val = loss(trial)
            if val < best:
                c, best, improved = trial, val, True
                lam = lam / 10.0 if lam > 1e-9 else 0.0
                break
            lam = 1e-3 if lam == 0 else lam * 10.0
        if not improved or best == 0.0:
            break
    return expr.with_constants(c)


# --------------------------------------------------------------------------
# random trees and mutations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    unary: tuple
    binary: tuple
    streams: tuple
    max_lag: int
    horizon: int
    var_prob: float = 0.6

    def leaf(self, rng):
        if rng.random() < self.var_prob:
            return Var(self.streams[rng.integers(len(self.streams))], int(rng.integers(self.max_lag)))
        return Const(float(rng.normal()))

    def tree(self, rng, max_depth: int):
        if max_depth <= 0 or rng.random() < 0.3:
            return self.leaf(rng)
        if self.unary and (not self.binary or rng.random() < 0.35):
            return Op(self.unary[rng.integers(len(self.unary))], (self.tree(rng, max_depth - 1),))
        kind = self.binary[rng.integers(len(self.binary))]
        return Op(kind, (self.tree(rng, max_depth - 1), self.tree(rng, max_depth - 1)))


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _mutate_once(kind, root, rng, space: SearchSpace, donor=None):
    paths = list(iter_paths(root))
    if kind == "replace_operator":
        ops = [(p, n) for p, n in paths if isinstance(n, Op)]
        if not ops:
            return None
        path, node = _pick(rng, ops)
        pool = space.unary if len(node.children) == 1 else space.binary
        choices = [k for k in pool if k != node.kind]
        if not choices:
            return None
        return replace_at(root, path, Op(_pick(rng, choices), node.children))
    if kind == "perturb_constant":
        consts = [(p, n) for p, n in paths if isinstance(n, Const)]
        if not consts:
            return None
        path, node = _pick(rng, consts)
        value = node.value * math.exp(rng.normal(0.0, 0.5)) if node.value != 0 else float(rng.normal())
        if rng.random() < 0.1:
            value = -value
        return replace_at(root, path, Const(value))
    if kind == "insert_unary":
        if not space.unary:
            return None
        path, node = _pick(rng, paths)
        return replace_at(root, path, Op(_pick(rng, space.unary), (node,)))
    if kind == "insert_binary":
        if not space.binary:
            return None
        path, node = _pick(rng, paths)
        other = space.leaf(rng)
        if rng.random() < 0.5 and "mul" in space.binary:
            other = Op("mul", (Const(float(rng.normal())), space.leaf(rng)))
        op = _pick(rng, space.binary)
        pair = (node, other) if rng.random() < 0.5 or op == "pow_s" else (other, node)
        return replace_at(root, path, Op(op, pair))
    if kind == "replace_subtree":
        path, _ = _pick(rng, paths)
        return replace_at(root, path, space.tree(rng, int(rng.integers(0, 4))))
    if kind == "delete_node":
        ops = [(p, n) for p, n in paths if isinstance(n, Op)]
        if not ops:
            return None
        path, node = _pick(rng, ops)
        return replace_at(root, path, _pick(rng, node.children))
    if kind == "swap_subtrees":
        if len(paths) < 3:
            return None
        a, b = sorted(rng.choice(len(paths), size=2, replace=False))
        pa, na = paths[a]
        pb, nb = paths[b]
        if pb[:len(pa)] == pa:  # nested: b inside a
            return None
        out = replace_at(root, pa, nb)
        return replace_at(out, pb, na)
    if kind == "crossover":
        if donor is None:
            return None
        path, _ = _pick(rng, paths)
        _, sub = _pick(rng, list(iter_paths(donor)))
        return replace_at(root, path, sub)
    raise ValueError(f"unknown mutation {kind!r}")


def mutate(ind: Individual | Expression, rng, space: SearchSpace, config: SRConfig,
           donor: Expression | None = None, kind: str | None = None) -> Expression:
    """One mutation, retried up to ``config.retries`` times; falls back to constant jitter."""
    expr = ind.expr if isinstance(ind, Individual) else ind
    weights = config.mutation_weights
    names = [k for k in MUTATIONS if weights.get(k, 0) > 0]
    probs = np.array([weights[k] for k in names], dtype=np.float64)
    probs /= probs.sum()
    for _ in range(config.retries):
        k = kind if kind is not None else names[int(rng.choice(len(names), p=probs))]
        new = _mutate_once(k, expr.root, rng, space, donor.root if donor is not None else None)
        if new is None:
            continue
        if complexity(new) <= config.max_complexity and depth(new) <= config.max_depth:
            return Expression(new, expr.horizon)
    new = _mutate_once("perturb_constant", expr.root, rng, space)
    return Expression(new, expr.horizon) if new is not None else expr


# --------------------------------------------------------------------------
# archive
# --------------------------------------------------------------------------

@dataclass
class ParetoFront:
    """Best validation-MSE individual per complexity, plus per-iteration history."""

    entries: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def update(self, ind: Individual) -> bool:
        if not ind.valid:
            return False
        cur = self.entries.get(ind.complexity)
        if cur is None or ind.mse < cur.mse:
            self.entries[ind.complexity] = ind
            return True
        return False

    def snapshot(self) -> None:
        self.history.append({c: e.mse for c, e in sorted(self.entries.items())})

    def pruned(self) -> list:
        out, last = [], math.inf
        for c in sorted(self.entries):
            e = self.entries[c]
            if e.mse < last:
                out.append(e)
                last = e.mse
        return out

    def best(self) -> Individual:
        return min(self.pruned(), key=lambda e: (e.mse, e.complexity))

    def __len__(self):
        return len(self.entries)

    def to_json(self, extra=None) -> list:
        rows = []
        for c in sorted(self.entries):
            e = self.entries[c]
            row = {"complexity": c, "mse": e.mse, "r2": e.r2,
                   "expr_infix": render(e.expr), "expr_sexpr": to_sexpr(e.expr)}
            if extra is not None:
                row.update(extra(e))
            rows.append(row)
        return rows

    @classmethod
    def from_json(cls, rows, horizon: int = 20) -> "ParetoFront":
        front = cls()
        for row in rows:
            expr = parse_sexpr(row["expr_sexpr"], horizon)
            front.entries[int(row["complexity"])] = Individual(
                expr, float(row["mse"]), float(row["r2"]), int(row["complexity"]))
        return front


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------

def _assess(expr: Expression, data: RegressionData, config: SRConfig) -> Individual:
    comp = complexity(expr)
    train_mse, _ = score(expr, data.train, data.streams)
    if not math.isfinite(train_mse):
        return Individual(expr, math.inf, -math.inf, comp)
    mse, r2 = score(expr, data.val, data.streams)
    var = data.train.var
    fit = train_mse / var if var > 0 else train_mse
    return Individual(expr, mse, r2, comp, train_mse, fit + config.parsimony * comp)


def _tournament(pop, rng, k):
    idx = rng.choice(len(pop), size=min(k, len(pop)), replace=False)
    return min((pop[i] for i in idx), key=lambda p: p.fitness)


def _as_data(db, config: SRConfig) -> RegressionData:
    if isinstance(db, RegressionData):
        data = db
    elif hasattr(db, "regression_data"):
        data = db.regression_data(config.val_fraction, config.seed)
    else:
        raise TypeError("fit expects RegressionData or an object with regression_data()")
    if config.max_lag > data.horizon:
        raise ValueError(f"max_lag {config.max_lag} exceeds database horizon {data.horizon}")
    if data.train.X.shape[0] == 0:
        raise SRError("empty database")
    return data


def fit(db, config: SRConfig | None = None, progress=None) -> ParetoFront:
    config = config or SRConfig()
    data = _as_data(db, config)
    ops = config.operators
    space = SearchSpace(tuple(k for k in UNARY_OPS if k in ops), tuple(k for k in BINARY_OPS if k in ops),
                        data.streams, config.max_lag, data.horizon)
    front = ParetoFront()
    rng0 = np.random.default_rng([config.seed, 0x1A17])
    # rows are already in random order, so the head is a uniform subsample
    opt_split = data.train.head(config.const_opt_rows)
    # every (stream, lag) enters the pool as a fitted c*var term
    seeds = [Expression(Const(float(np.mean(data.train.y))), data.horizon)]
    seeds += [optimize_constants(Expression(Op("mul", (Const(1.0), Var(s, lag))), data.horizon),
                                 opt_split, data.streams, config.const_opt_steps)
              for s in data.streams for lag in range(config.max_lag)]
    seeds += [Expression(space.tree(rng0, int(rng0.integers(0, 3))), data.horizon)
              for _ in range(max(config.population - len(seeds), 0))]
    pop = [_assess(e, data, config) for e in seeds]
    for ind in pop:
        front.update(ind)
    front.snapshot()
    n_elite = max(1, int(config.elite_fraction * config.population))

    def child(it, i, attempt, pop_snapshot):
        rng = np.random.default_rng([config.seed, it, i, attempt])
        parent = _tournament(pop_snapshot, rng, config.tournament_size)
        donor = _tournament(pop_snapshot, rng, config.tournament_size)
        expr = mutate(parent, rng, space, config, donor=donor.expr)
        if expr.constants and rng.random() < config.const_opt_prob:
            expr = optimize_constants(expr, opt_split, data.streams, config.const_opt_steps)
        return _assess(expr, data, config)

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for it in range(1, config.iterations + 1):
            for attempt in range(config.retries + 1):
                args = [(it, i, attempt, pop) for i in range(config.population)]
                if pool is not None:
                    children = list(pool.map(lambda a: child(*a), args))
                else:
                    children = [child(*a) for a in args]
                if any(c.valid for c in children):
                    break
            else:
                raise SRError(f"iteration {it}: every candidate invalid after {config.retries} retries")
            for c in children:
                front.update(c)
            elites = sorted((p for p in pop if p.valid), key=lambda p: p.fitness)[:n_elite]
            merged, seen = [], set()
            for p in elites + front.pruned() + children:
                if p.valid and p.key not in seen:
                    seen.add(p.key)
                    merged.append(p)
            pop = merged[:config.population]
            while len(pop) < 2:
                pop.append(children[len(pop)])
            front.snapshot()
            if progress is not None:
                progress(it, front)
        # final polish of archived constants; kept only when validation improves
        for c in sorted(front.entries):
            e = front.entries[c]
            if e.expr.constants:
                polished = optimize_constants(e.expr, data.train, data.streams, 50)
                front.update(_assess(polished, data, config))
        front.snapshot()
    finally:
        if pool is not None:
            pool.shutdown()
    return front


def save_front(front: ParetoFront, path, extra=None) -> None:
    with open(path, "w") as fh:
        json.dump(front.to_json(extra), fh, indent=1, sort_keys=True)


def config_from_dict(data: dict) -> SRConfig:
    known = set(SRConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown sr keys {sorted(unknown)}")
    return SRConfig(**data)


def config_to_dict(cfg: SRConfig) -> dict:
    d = asdict(cfg)
    if d["operator_subset"] is not None:
        d["operator_subset"] = list(d["operator_subset"])
    return d
