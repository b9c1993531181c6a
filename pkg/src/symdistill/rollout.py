"""Running coordinate-wise update rules on optimizee tasks.

A rule exposes ``streams`` (the feature streams it consumes), ``reset(d)``
and ``step(grad) -> (delta, feats)`` where ``x_{t+1} = x_t + delta`` and
``feats`` maps stream names to the per-coordinate values seen at this step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optimizers import (
    ClassicalConfig, ClassicalState, FeatureParams, FeatureState, features_update, step_classical,
)
from .tasks import eval_loss, eval_loss_grad

ALL_STREAMS = ("g", "mhat", "ghat", "nhat", "t")
DIVERGENCE_FACTOR = 1e6


class FeatureSource:
    """Computes every named stream from the raw gradient sequence."""

    def __init__(self, params: FeatureParams | None = None, tangents: bool = False):
        self.params = params or FeatureParams()
        self.tangents = tangents
        self.state = None

    def reset(self, d: int) -> None:
        self.state = FeatureState.zeros(d, tangents=self.tangents)

    def step(self, grad: np.ndarray) -> dict:
        mhat, ghat, nhat = features_update(self.state, grad, self.params)
        t = np.full(grad.shape, float(self.state.t))
        return {"g": grad, "mhat": mhat, "ghat": ghat, "nhat": nhat, "t": t}


class ClassicalRule:
    streams = ("g",)

    def __init__(self, config: ClassicalConfig):
        self.config = config
        self.state = None
        self.t = 0

    def reset(self, d: int) -> None:
        self.state = ClassicalState.zeros(d)
        self.t = 0

    def step(self, grad: np.ndarray):
        self.t += 1
        return step_classical(self.state, grad, self.config, self.t), {"g": grad}

    def describe(self) -> str:
        return self.config.label()


class History:
    """Newest-first lag buffer of shape (d, n_streams, horizon)."""

    def __init__(self, d: int, streams, horizon: int):
        self.streams = tuple(streams)
        self.horizon = horizon
        self.buf = np.zeros((d, len(self.streams), horizon))
        self.filled = 0

    def push(self, feats: dict) -> None:
        self.buf[:, :, 1:] = self.buf[:, :, :-1]
        for i, s in enumerate(self.streams):
            self.buf[:, i, 0] = feats[s]
        self.filled = min(self.filled + 1, self.horizon)

    def matrix(self, rows=None) -> np.ndarray:
        """Rows of the (d, n_streams*horizon) design matrix, stream-major."""
        buf = self.buf if rows is None else self.buf[rows]
        return buf.reshape(buf.shape[0], -1).copy()


@dataclass
class Trajectory:
    losses: np.ndarray
    final_loss: float
    x_final: np.ndarray
    diverged: bool
    steps_run: int


def run_rule(rule, task, steps: int, on_step=None) -> Trajectory:
    """Optimize ``task`` from its x0 for ``steps`` updates.

    ``losses[t]`` is the (minibatch) loss at ``x_t``; ``final_loss`` is the
    full objective at the last iterate. ``on_step(t, grad, feats, delta)``
    is invoked after each rule step.
    """
    x = task.x0.copy()
    rule.reset(task.dim)
    losses = np.full(steps, np.nan)
    ref = None
    diverged = False
    t_done = 0
    for t in range(steps):
        loss, grad = eval_loss_grad(task, x, task.batch(t))
        losses[t] = loss
        if ref is None:
            ref = max(abs(loss), 1.0)
        if not np.isfinite(loss) or abs(loss) > DIVERGENCE_FACTOR * ref or not np.all(np.isfinite(grad)):
            diverged = True
            break
        delta, feats = rule.step(grad)
        if on_step is not None:
            on_step(t, grad, feats, delta)
        x = x + delta
        t_done = t + 1
    final = np.nan if diverged else eval_loss(task, x)
    if not np.isfinite(final) or (ref is not None and abs(final) > DIVERGENCE_FACTOR * ref):
        diverged = True
    return Trajectory(losses, float(final), x, diverged, t_done)
