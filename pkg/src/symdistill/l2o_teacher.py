"""Coordinate-wise LSTM optimizer and its meta-training.

Every coordinate of the optimizee is fed through the same small recurrent
network (shared weights, per-coordinate hidden state); the network output is
the step ``delta`` with ``x_{t+1} = x_t + delta``.

Meta-gradient. The optimizer inputs are detached, so ``x_t`` depends on the
weights only through the earlier outputs: ``x_t = x_0 + sum_{s<t} delta_s``.
The gradient of ``sum_t w_t f(x_t)`` w.r.t. the weights therefore equals the
gradient of the linear surrogate ``sum_s a_s . delta_s`` with adjoint
``a_s = sum_{t>s} w_t grad f(x_t)``; one BPTT pass through the recurrent
network computes it. Nothing in this path differentiates through the
feature construction.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .optimizers import FeatureParams
from .rollout import FeatureSource
from .tasks import TaskSpec, eval_loss_grad, sample_task

log = logging.getLogger(__name__)

# variant -> (input streams, projection width, recurrent layers)
VARIANTS = {
    "dm": (("g",), 0, 2),
    "rp": (("mhat", "ghat"), 20, 2),
    "rp_small": (("mhat", "ghat"), 6, 1),
    "rp_small_extra": (("mhat", "ghat", "nhat"), 6, 1),
}


class StreamMismatchError(ValueError):
    pass


@dataclass
class TeacherConfig:
    variant: str = "rp_small_extra"
    hidden: int = 20
    proj: int | None = None
    layers: int | None = None
    out_scale: float = 0.1
    feature_params: FeatureParams = field(default_factory=FeatureParams)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown teacher variant {self.variant!r}")
        if isinstance(self.feature_params, dict):
            self.feature_params = FeatureParams(**self.feature_params)
        _, proj, layers = VARIANTS[self.variant]
        if self.proj is None:
            self.proj = proj
        if self.layers is None:
            self.layers = layers
        if self.hidden < 1 or self.layers < 1 or self.proj < 0:
            raise ValueError("hidden and layers must be positive, proj non-negative")

    @property
    def streams(self) -> tuple:
        return VARIANTS[self.variant][0]


def param_shapes(cfg: TeacherConfig) -> dict:
    shapes = {}
    n_in = len(cfg.streams)
    if cfg.proj:
        shapes["Wp"] = (n_in, cfg.proj)
        shapes["bp"] = (cfg.proj,)
        n_in = cfg.proj
    H = cfg.hidden
    for layer in range(cfg.layers):
        shapes[f"Wx{layer}"] = (n_in, 4 * H)
        shapes[f"Wh{layer}"] = (H, 4 * H)
        shapes[f"b{layer}"] = (4 * H,)
        n_in = H
    shapes["Wo"] = (H, 1)
    shapes["bo"] = (1,)
    return shapes


@dataclass
class TeacherModel:
    config: TeacherConfig
    phi: np.ndarray

    @property
    def shapes(self) -> dict:
        return param_shapes(self.config)

    @classmethod
    def zeros(cls, config: TeacherConfig) -> "TeacherModel":
        n = sum(int(np.prod(s)) for s in param_shapes(config).values())
        return cls(config, np.zeros(n))

    @classmethod
    def init(cls, config: TeacherConfig, seed: int = 0) -> "TeacherModel":
        rng = np.random.default_rng([seed, 0x7EAC])
        parts = []
        H = config.hidden
        for name, shp in param_shapes(config).items():
            fan_in = shp[0] if len(shp) == 2 else 1
            if name.startswith("b") and name != "bo" and name != "bp":
                b = np.zeros(shp)
                b[H:2 * H] = 1.0  # forget gate bias
                parts.append(b)
            elif name in ("bo", "bp"):
                parts.append(np.zeros(shp))
            else:
                bound = 1.0 / math.sqrt(fan_in)
                parts.append(rng.uniform(-bound, bound, size=shp).ravel())
        return cls(config, np.concatenate([p.ravel() for p in parts]))

    def unpack(self, phi: np.ndarray | None = None) -> dict:
        phi = self.phi if phi is None else phi
        out, pos = {}, 0
        for name, shp in self.shapes.items():
            size = int(np.prod(shp))
            out[name] = phi[pos:pos + size].reshape(shp)
            pos += size
        return out

    def init_hidden(self, n: int) -> list:
        H = self.config.hidden
        return [(np.zeros((n, H)), np.zeros((n, H))) for _ in range(self.config.layers)]

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        return {"config": cfg,
                "shapes": {k: list(v) for k, v in self.shapes.items()},
                "phi": [float(v) for v in self.phi]}

    @classmethod
    def from_json(cls, data: dict) -> "TeacherModel":
        cfg = TeacherConfig(**data["config"])
        model = cls(cfg, np.asarray(data["phi"], dtype=np.float64))
        expected = {k: list(v) for k, v in model.shapes.items()}
        if expected != data["shapes"] or model.phi.size != sum(int(np.prod(s)) for s in model.shapes.values()):
            raise ValueError("checkpoint shapes do not match its config")
        return model


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(P, cfg, feats, hidden):
    """One step for N coordinates; returns (out (N,), hidden', cache)."""
    H = cfg.hidden
    inp = feats @ P["Wp"] + P["bp"] if cfg.proj else feats
    new_hidden, layer_caches = [], []
    for layer in range(cfg.layers):
        h_prev, c_prev = hidden[layer]
        z = inp @ P[f"Wx{layer}"] + h_prev @ P[f"Wh{layer}"] + P[f"b{layer}"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        layer_caches.append((inp, h_prev, c_prev, i, f, g, o, tc))
        new_hidden.append((h, c))
        inp = h
    out = cfg.out_scale * (inp @ P["Wo"][:, 0] + P["bo"][0])
    return out, new_hidden, (feats, layer_caches, inp)


def _backward(P, cfg, cache, d_out, d_hidden, grads):
    """Accumulate weight grads for one step; returns d(hidden_prev)."""
    H = cfg.hidden
    feats, layer_caches, top = cache
    d_out = cfg.out_scale * d_out
    grads["Wo"][:, 0] += top.T @ d_out
    grads["bo"][0] += d_out.sum()
    dh_in = np.outer(d_out, P["Wo"][:, 0])
    d_prev = [None] * cfg.layers
    for layer in range(cfg.layers - 1, -1, -1):
        inp, h_prev, c_prev, i, f, g, o, tc = layer_caches[layer]
        dh_next, dc_next = d_hidden[layer]
        dh = dh_in + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.empty((dh.shape[0], 4 * H))
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        grads[f"Wx{layer}"] += inp.T @ dz
        grads[f"Wh{layer}"] += h_prev.T @ dz
        grads[f"b{layer}"] += dz.sum(axis=0)
        d_prev[layer] = (dz @ P[f"Wh{layer}"].T, dc * f)
        dh_in = dz @ P[f"Wx{layer}"].T
    if cfg.proj:
        grads["Wp"] += feats.T @ dh_in
        grads["bp"] += dh_in.sum(axis=0)
    return d_prev


def stack_features(feats: dict, streams) -> np.ndarray:
    missing = [s for s in streams if s not in feats]
    if missing:
        raise StreamMismatchError(f"features missing streams {missing}")
    return np.stack([feats[s] for s in streams], axis=1)


def predict(model: TeacherModel, features, hidden):
    """Update per coordinate for ``features`` (dict of streams or (N, S) array)."""
    cfg = model.config
    if isinstance(features, dict):
        features = stack_features(features, cfg.streams)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != len(cfg.streams):
        raise StreamMismatchError(f"expected (N, {len(cfg.streams)}) features for streams {cfg.streams}")
    out, hidden, _ = _forward(model.unpack(), cfg, features, hidden)
    return out, hidden


class TeacherRule:
    """Adapter exposing a teacher through the rollout rule interface."""

    def __init__(self, model: TeacherModel):
        self.model = model
        self.streams = model.config.streams
        self.source = FeatureSource(model.config.feature_params)
        self._P = model.unpack()
        self.hidden = None

    def reset(self, d: int) -> None:
        self.source.reset(d)
        self.hidden = self.model.init_hidden(d)

    def step(self, grad):
        feats = self.source.step(grad)
        out, self.hidden, _ = _forward(self._P, self.model.config,
                                       stack_features(feats, self.streams), self.hidden)
        return out, feats

    def describe(self) -> str:
        return f"teacher:{self.model.config.variant}"


# --------------------------------------------------------------------------
# unrolled meta-objective
# --------------------------------------------------------------------------

@dataclass
class MetaTrainConfig:
    unroll: int = 20
    weights: list | None = None
    segments: int = 5
    meta_lr: float = 1e-3
    tasks_per_batch: int = 4
    meta_iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")
        if self.segments < 1 or self.tasks_per_batch < 1 or self.meta_iterations < 0:
            raise ValueError("segments and tasks_per_batch must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.unroll,) or np.any(w < 0) or not np.any(w > 0):
                raise ValueError("weights need one non-negative entry per unroll step, not all zero")

    def weight_vector(self) -> np.ndarray:
        return np.ones(self.unroll) if self.weights is None else np.asarray(self.weights, dtype=np.float64)


class UnrollState:
    """Lockstep optimization state for a batch of tasks sharing one network."""

    def __init__(self, model: TeacherModel, tasks):
        self.tasks = list(tasks)
        self.sizes = [t.dim for t in self.tasks]
        self.offsets = np.cumsum([0] + self.sizes)
        self.x = np.concatenate([t.x0 for t in self.tasks])
        self.hidden = model.init_hidden(int(self.offsets[-1]))
        self.source = FeatureSource(model.config.feature_params)
        self.source.reset(int(self.offsets[-1]))
        self.step = 0

    def loss_grad(self, x):
        losses, grads = [], []
        for k, task in enumerate(self.tasks):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            loss, grad = eval_loss_grad(task, x[lo:hi], task.batch(self.step))
            losses.append(loss)
            grads.append(grad)
        return np.array(losses), np.concatenate(grads)


def unroll_segment(model: TeacherModel, state: UnrollState, weights: np.ndarray,
                   phi: np.ndarray | None = None, replay=None, record=None):
    """Run ``len(weights)`` steps; return (sum over tasks of sum_t w_t f(x_t), dL/dphi).

    ``replay`` (list of (N, S) arrays) replaces the computed features, which
    lets a finite-difference oracle perturb ``phi`` while holding the
    detached inputs fixed. ``record`` (a list) receives the features used.
    """
    cfg = model.config
    P = model.unpack(phi)
    caches, grads_f = [], []
    total = 0.0
    for k, w in enumerate(weights):
        losses, grad = state.loss_grad(state.x)
        total += w * losses.sum()
        grads_f.append(grad)
        if replay is not None:
            feats = replay[k]
            state.source.step(grad)
        else:
            feats = stack_features(state.source.step(grad), cfg.streams)
        if record is not None:
            record.append(feats)
        out, state.hidden, cache = _forward(P, cfg, feats, state.hidden)
        caches.append(cache)
        state.x = state.x + out
        state.step += 1
    # backward: adjoint a_s = sum_{t>s} w_t grad f(x_t), cut at the segment start
    grads = {name: np.zeros(shp) for name, shp in model.shapes.items()}
    n = state.x.shape[0]
    H = cfg.hidden
    d_hidden = [(np.zeros((n, H)), np.zeros((n, H))) for _ in range(cfg.layers)]
    adj = np.zeros(n)
    for k in range(len(weights) - 1, -1, -1):
        d_hidden = _backward(P, cfg, caches[k], adj, d_hidden, grads)
        adj = adj + weights[k] * grads_f[k]
    flat = np.concatenate([grads[name].ravel() for name in model.shapes])
    return float(total), flat


def unroll_loss(model: TeacherModel, task, cfg: MetaTrainConfig, with_grad: bool = False):
    """Weighted unrolled loss ``sum_t w_t f(x_t)`` over one fresh segment."""
    state = UnrollState(model, [task])
    loss, grad = unroll_segment(model, state, cfg.weight_vector())
    if not np.isfinite(loss):
        log.warning("non-finite unrolled loss")
    return (loss, grad) if with_grad else loss


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float) -> "AdamState":
        return cls(lr, np.zeros(n), np.zeros(n))

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainLog:
    curve: list = field(default_factory=list)
    skipped: int = 0
    stopped_early: bool = False
    reason: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["meta_iter", "loss"])
            for it, loss in self.curve:
                w.writerow([it, repr(float(loss))])


def meta_train(model: TeacherModel, task_spec: TaskSpec, cfg: MetaTrainConfig,
               log_out: TrainLog | None = None) -> TeacherModel:
    """Adam on the truncated unrolled objective over freshly sampled tasks.

    Task ``k`` of meta-iteration ``it`` is ``sample_task(spec, it*B + k)``;
    each task runs ``segments`` truncated segments of ``unroll`` steps with
    one meta-update per segment.
    """
    train_log = log_out if log_out is not None else TrainLog()
    phi = model.phi.copy()
    if cfg.meta_iterations == 0:
        return TeacherModel(model.config, phi)
    opt = AdamState.zeros(phi.size, cfg.meta_lr)
    weights = cfg.weight_vector()
    norm = weights.sum() * cfg.tasks_per_batch
    initial = None
    for it in range(cfg.meta_iterations):
        tasks = [sample_task(task_spec, it * cfg.tasks_per_batch + k) for k in range(cfg.tasks_per_batch)]
        state = UnrollState(TeacherModel(model.config, phi), tasks)
        seg_losses = []
        for _ in range(cfg.segments):
            loss, grad = unroll_segment(model, state, weights, phi=phi)
            loss /= norm
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                train_log.skipped += 1
                log.info("meta-iter %d: non-finite segment loss, meta-step skipped", it)
                break
            seg_losses.append(loss)
            phi = phi + opt.step(grad / norm)
        if not seg_losses:
            continue
        mean_loss = float(np.mean(seg_losses))
        train_log.curve.append((it, mean_loss))
        if initial is None:
            initial = max(abs(mean_loss), 1e-12)
        elif abs(mean_loss) > 1e6 * initial:
            train_log.stopped_early = True
            train_log.reason = f"diverged at meta-iter {it}: loss {mean_loss:.3g} vs initial {initial:.3g}"
            log.warning(train_log.reason)
            break
        if it % 10 == 0:
            log.info("meta-iter %d loss %.5g", it, mean_loss)
    return TeacherModel(model.config, phi)


def save_checkpoint(model: TeacherModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> TeacherModel:
    with open(path) as fh:
        return TeacherModel.from_json(json.load(fh))
