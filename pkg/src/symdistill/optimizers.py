"""Hand-designed optimizers and the normalized gradient features.

Features per coordinate, with bias-corrected first/second moments
``m_t = EMA_b1(g)/(1-b1^t)`` and ``v_t = EMA_b2(g^2)/(1-b2^t)``:

* ``mhat = m_t / (sqrt(v_t) + eps)``
* ``ghat = g_t / (sqrt(v_t) + eps)``
* ``nhat``: as ``mhat`` but the first-moment input is
  ``k1*pow_s(g, 1+a1) + k2*pow_s(g, 1-a1)`` and the second-moment input is
  ``max(0, l1*|g|^(2+a2) + l2*|g|^(2-a2))``.

The EMA accumulators are kept raw; bias correction is applied on read.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

FEATURE_PARAM_NAMES = ("k1", "k2", "l1", "l2", "alpha1", "alpha2")


@dataclass
class ClassicalConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    nesterov: bool = False
    cosine_decay: bool = False
    t_max: int = 100
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("momentum", "beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    def label(self) -> str:
        parts = [self.kind, f"lr={self.lr:g}"]
        if self.kind == "momentum":
            parts.append(f"beta={self.momentum:g}")
            if self.nesterov:
                parts.append("nesterov")
        if self.kind == "adam":
            parts.append(f"betas=({self.beta1:g},{self.beta2:g})")
        if self.cosine_decay:
            parts.append("cosine")
        return " ".join(parts)


def baseline_grid(lrs=(0.1, 0.01, 0.001), momenta=(0.5, 0.9, 0.99),
                  adam_lrs=(0.01, 0.001), t_max=100) -> list[ClassicalConfig]:
    """SGD/momentum/Nesterov/cosine sweep plus Adam, as a flat config list."""
    grid = []
    for cosine in (False, True):
        for lr in lrs:
            grid.append(ClassicalConfig("sgd", lr, cosine_decay=cosine, t_max=t_max))
            for beta in momenta:
                for nesterov in (False, True):
                    grid.append(ClassicalConfig("momentum", lr, momentum=beta, nesterov=nesterov,
                                                cosine_decay=cosine, t_max=t_max))
    for lr in adam_lrs:
        grid.append(ClassicalConfig("adam", lr, t_max=t_max))
    return grid


@dataclass
class ClassicalState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "ClassicalState":
        return cls(np.zeros(d), np.zeros(d))


def step_classical(state: ClassicalState, grad: np.ndarray, config: ClassicalConfig, t: int) -> np.ndarray:
    """Update vector for step ``t`` (1-based); mutates ``state``."""
    if t < 1:
        raise ValueError("t is 1-based")
    lr = config.lr
    if config.cosine_decay:
        frac = min(t, config.t_max) / config.t_max
        lr = lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    if config.kind == "sgd":
        return -lr * grad
    if config.kind == "momentum":
        beta = config.momentum
        state.m = beta * state.m + (1 - beta) * grad
        if config.nesterov:
            return -lr * (beta * state.m + (1 - beta) * grad)
        return -lr * state.m
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** t)
    v_hat = state.v / (1 - b2 ** t)
    return -lr * m_hat / (np.sqrt(v_hat) + config.eps)


@dataclass
class FeatureParams:
    k1: float = 0.5
    k2: float = 0.5
    l1: float = 0.5
    l2: float = 0.5
    alpha1: float = 0.5
    alpha2: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_PARAM_NAMES])

    def with_vector(self, values) -> "FeatureParams":
        kw = asdict(self)
        kw.update({n: float(v) for n, v in zip(FEATURE_PARAM_NAMES, values)})
        return FeatureParams(**kw)


@dataclass
class FeatureState:
    m: np.ndarray
    v: np.ndarray
    mn: np.ndarray
    vn: np.ndarray
    t: int = 0
    # forward-mode tangents of the n-accumulators w.r.t. FEATURE_PARAM_NAMES
    dmn: np.ndarray | None = None
    dvn: np.ndarray | None = None
    dnhat: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, d: int, tangents: bool = False) -> "FeatureState":
        z = lambda: np.zeros(d)
        st = cls(z(), z(), z(), z())
        if tangents:
            st.dmn = np.zeros((6, d))
            st.dvn = np.zeros((6, d))
        return st


def _pow_s(g, e):
    with np.errstate(all="ignore"):
        out = np.sign(g) * np.abs(g) ** e
    return np.where(g == 0.0, 0.0, out)


def _abs_pow(g, e):
    if e == 2.0:
        return g * g
    with np.errstate(all="ignore"):
        out = np.abs(g) ** e
    return np.where(g == 0.0, 0.0, out)


def features_update(state: FeatureState, grad: np.ndarray, params: FeatureParams):
    """Advance the accumulators by one gradient and return ``(mhat, ghat, nhat)``.

    When the state was created with ``tangents=True`` the derivative of
    ``nhat`` w.r.t. the six feature parameters is left in ``state.dnhat``
    with shape (6, d).
    """
    state.t += 1
    t = state.t
    b1, b2, eps = params.beta1, params.beta2, params.eps
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    g = grad
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * (g * g)
    denom = np.sqrt(state.v / c2) + eps
    mhat = (state.m / c1) / denom
    ghat = g / denom

    a1, a2 = params.alpha1, params.alpha2
    p_hi, p_lo = _pow_s(g, 1 + a1), _pow_s(g, 1 - a1)
    q_hi, q_lo = _abs_pow(g, 2 + a2), _abs_pow(g, 2 - a2)
    u = params.k1 * p_hi + params.k2 * p_lo
    w_raw = params.l1 * q_hi + params.l2 * q_lo
    w = np.maximum(w_raw, 0.0)
    state.mn = b1 * state.mn + (1 - b1) * u
    state.vn = b2 * state.vn + (1 - b2) * w
    mc = state.mn / c1
    root = np.sqrt(state.vn / c2)
    nden = root + eps
    nhat = mc / nden

    if state.dmn is not None:
        with np.errstate(all="ignore"):
            log_g = np.where(g == 0.0, 0.0, np.log(np.abs(np.where(g == 0.0, 1.0, g))))
        du = np.zeros_like(state.dmn)
        du[0] = p_hi
        du[1] = p_lo
        du[4] = log_g * (params.k1 * p_hi - params.k2 * p_lo)
        dw = np.zeros_like(state.dvn)
        active = w_raw > 0.0
        dw[2] = np.where(active, q_hi, 0.0)
        dw[3] = np.where(active, q_lo, 0.0)
        dw[5] = np.where(active, log_g * (params.l1 * q_hi - params.l2 * q_lo), 0.0)
        state.dmn = b1 * state.dmn + (1 - b1) * du
        state.dvn = b2 * state.dvn + (1 - b2) * dw
        dmc = state.dmn / c1
        with np.errstate(all="ignore"):
            droot = np.where(root > 0.0, (state.dvn / c2) / (2.0 * np.where(root > 0, root, 1.0)), 0.0)
        state.dnhat = dmc / nden - (mc / (nden * nden)) * droot
    return mhat, ghat, nhat
