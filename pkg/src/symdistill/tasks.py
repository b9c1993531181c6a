"""Optimizee problems: a generalized Rastrigin objective and MLP classification.

``rastrigin``: ``f(x) = ||Ax + b||^2 + 0.5 * c . cos(x)`` with A, b, c drawn
i.i.d. N(0, 1) per task.

``mlp_classify``: softmax cross-entropy of a ReLU MLP whose flat parameter
vector is the optimization variable. ``layers`` lists hidden widths; an
output layer of ``n_classes`` units is appended. Data comes from a seeded
Gaussian mixture or from IDX files.
"""
from __future__ import annotations

import functools
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    family: str = "rastrigin"
    dim: int = 10
    layers: tuple = (50, 20)
    dataset: str = "synthetic"
    idx_images: str | None = None
    idx_labels: str | None = None
    input_dim: int = 16
    n_classes: int = 10
    n_samples: int = 2048
    mixture_scale: float = 0.5
    batch_size: int = 128
    x0_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(h) for h in self.layers))
        if self.family not in ("rastrigin", "mlp_classify"):
            raise ValueError(f"unknown task family {self.family!r}")
        if self.family == "rastrigin" and self.dim < 1:
            raise ValueError("rastrigin dim must be >= 1")
        if any(h < 1 for h in self.layers):
            raise ValueError("layer sizes must be positive")
        if self.dataset not in ("synthetic", "idx_files"):
            raise ValueError(f"unknown dataset source {self.dataset!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return self.X.shape[0]


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def synth_dataset(spec: TaskSpec) -> Dataset:
    """Gaussian mixture: class means ~ N(0, mixture_scale^2 I), unit covariance, uniform priors."""
    return _synth(spec.seed, spec.input_dim, spec.n_classes, spec.n_samples, spec.mixture_scale)


@functools.lru_cache(maxsize=16)
def _synth(seed, dim, k, n, scale):
    rng = np.random.default_rng([seed, 0x5EED])
    means = rng.normal(0.0, scale, size=(k, dim))
    y = rng.integers(0, k, size=n)
    X = means[y] + rng.normal(size=(n, dim))
    X.setflags(write=False)
    y.setflags(write=False)
    return Dataset(X, y, k)


def mixture_means(spec: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    return rng.normal(0.0, spec.mixture_scale, size=(spec.n_classes, spec.input_dim))


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read one IDX file (images 0x803 or labels 0x801) into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError("labels must lie in 0..9")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), 10)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def dataset_for(spec: TaskSpec) -> Dataset:
    if spec.dataset == "idx_files":
        if not spec.idx_images or not spec.idx_labels:
            raise FileNotFoundError("idx_files dataset needs idx_images and idx_labels paths")
        return _idx_cached(str(spec.idx_images), str(spec.idx_labels))
    return synth_dataset(spec)


@functools.lru_cache(maxsize=4)
def _idx_cached(images, labels):
    return load_idx_dataset(images, labels)


# --------------------------------------------------------------------------
# task instances
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RastriginInstance:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    family: str = field(default="rastrigin", init=False)

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def batch(self, step: int):
        return None

    def full_batch(self):
        return None


@dataclass(frozen=True)
class MLPInstance:
    data: Dataset
    shapes: tuple
    x0: np.ndarray
    batch_size: int
    order_seed: tuple
    family: str = field(default="mlp_classify", init=False)

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def batch(self, step: int):
        """Minibatch for optimization step ``step``: seeded shuffle per epoch."""
        n = len(self.data)
        bs = min(self.batch_size, n)
        per_epoch = n // bs
        epoch, k = divmod(step, per_epoch)
        perm = np.random.default_rng(list(self.order_seed) + [epoch]).permutation(n)
        idx = perm[k * bs:(k + 1) * bs]
        return self.data.X[idx], self.data.y[idx]

    def full_batch(self):
        return self.data.X, self.data.y


TaskInstance = RastriginInstance | MLPInstance


def mlp_shapes(input_dim: int, layers, n_classes: int) -> tuple:
    sizes = [input_dim, *layers, n_classes]
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes.append((fan_in, fan_out))
        shapes.append((fan_out,))
    return tuple(shapes)


def _mlp_init(shapes, rng) -> np.ndarray:
    parts = []
    for i in range(0, len(shapes), 2):
        fan_in, fan_out = shapes[i]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(parts)


def sample_task(spec: TaskSpec, index: int = 0) -> TaskInstance:
    """Draw task ``index`` of the distribution; deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, int(index)])
    if spec.family == "rastrigin":
        d = spec.dim
        A = rng.normal(size=(d, d))
        b = rng.normal(size=d)
        c = rng.normal(size=d)
        x0 = rng.normal(0.0, spec.x0_scale, size=d)
        return RastriginInstance(A, b, c, x0)
    data = dataset_for(spec)
    shapes = mlp_shapes(data.X.shape[1], spec.layers, data.n_classes)
    x0 = _mlp_init(shapes, rng)
    return MLPInstance(data, shapes, x0, spec.batch_size, (spec.seed, int(index), 0xBA7C))


def _unflatten(x, shapes):
    out, pos = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append(x[pos:pos + size].reshape(shp))
        pos += size
    return out


def _mlp_loss_grad(x, shapes, X, y):
    params = _unflatten(x, shapes)
    acts = [X]
    pre = []
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    logits = acts[-1]
    shift = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shift).sum(axis=1))
    n = X.shape[0]
    loss = float(np.mean(logsum - shift[np.arange(n), y]))
    probs = np.exp(shift - logsum[:, None])
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(params)
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[2 * i].T) * (pre[i - 1] > 0)
    return loss, np.concatenate([g.ravel() for g in grads])


def eval_loss_grad(instance: TaskInstance, x: np.ndarray, batch=None):
    """Loss and gradient at ``x``; ``batch`` is an (X, y) pair for MLP tasks."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (instance.dim,):
        raise ValueError(f"x has shape {x.shape}, task expects ({instance.dim},)")
    if isinstance(instance, RastriginInstance):
        r = instance.A @ x + instance.b
        loss = float(r @ r + 0.5 * instance.c @ np.cos(x))
        grad = 2.0 * instance.A.T @ r - 0.5 * instance.c * np.sin(x)
        return loss, grad
    Xb, yb = batch if batch is not None else instance.full_batch()
    return _mlp_loss_grad(x, instance.shapes, Xb, yb)


def eval_loss(instance: TaskInstance, x: np.ndarray) -> float:
    """Full-objective loss (whole dataset for MLP tasks)."""
    return eval_loss_grad(instance, x, instance.full_batch())[0]


def accuracy(instance: MLPInstance, x: np.ndarray) -> float:
    params = _unflatten(np.asarray(x), instance.shapes)
    h = instance.data.X
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return float(np.mean(np.argmax(h, axis=1) == instance.data.y))


# presets matching the three benchmark problems
P1 = TaskSpec(family="rastrigin", dim=10)
P2 = TaskSpec(family="mlp_classify", layers=(50, 20))
P3 = TaskSpec(family="mlp_classify", layers=(50, 20, 20, 12))
PRESETS = {"p1": P1, "p2": P2, "p3": P3}
