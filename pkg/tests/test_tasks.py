import gzip
import hashlib

import numpy as np
import pytest

from symdistill.tasks import (
    P1, P3, IdxFormatError, MLPInstance, TaskSpec, eval_loss, eval_loss_grad,
    load_idx, load_idx_dataset, mixture_means, sample_task, synth_dataset, write_idx,
)

SMALL_MLP = TaskSpec(family="mlp_classify", layers=(6, 4), input_dim=5, n_classes=3,
                     n_samples=200, batch_size=32, seed=3)


def _fd(f, x, h=1e-5):
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x); e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_rastrigin_shapes_and_origin_loss():
    inst = sample_task(P1, 0)
    assert inst.A.shape == (10, 10) and inst.b.shape == (10,) and inst.c.shape == (10,)
    loss, _ = eval_loss_grad(inst, np.zeros(10))
    assert loss == pytest.approx(inst.b @ inst.b + 0.5 * inst.c.sum(), rel=1e-14)


def test_sampling_deterministic():
    a, b = sample_task(P1, 7), sample_task(P1, 7)
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.x0, b.x0)
    assert not np.array_equal(a.A, sample_task(P1, 8).A)
    m1, m2 = sample_task(SMALL_MLP, 2), sample_task(SMALL_MLP, 2)
    np.testing.assert_array_equal(m1.x0, m2.x0)
    np.testing.assert_array_equal(m1.batch(11)[0], m2.batch(11)[0])


def test_rastrigin_entry_statistics():
    spec = TaskSpec(family="rastrigin", dim=10, seed=11)
    vals = np.concatenate([sample_task(spec, i).A.ravel() for i in range(10_000)])
    n = vals.size
    assert abs(vals.mean()) < 3 / np.sqrt(n)
    # var of the sample variance of N(0,1) is 2/n
    assert abs(vals.var() - 1.0) < 3 * np.sqrt(2 / n)


@pytest.mark.parametrize("spec", [P1, SMALL_MLP], ids=["rastrigin", "mlp"])
def test_gradients_match_finite_differences(spec):
    rng = np.random.default_rng(0)
    for k in range(20):
        inst = sample_task(spec, k)
        x = inst.x0 + 0.3 * rng.normal(size=inst.dim)
        batch = inst.batch(k)
        _, g = eval_loss_grad(inst, x, batch)
        fd = _fd(lambda z: eval_loss_grad(inst, z, batch)[0], x)
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-5


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_loss_grad(sample_task(P1, 0), np.zeros(3))


def test_zero_mlp_loss_is_log_k():
    inst = sample_task(SMALL_MLP, 0)
    y = np.repeat(np.arange(3), 4)
    X = np.random.default_rng(0).normal(size=(12, 5))
    loss, _ = eval_loss_grad(inst, np.zeros(inst.dim), (X, y))
    assert loss == pytest.approx(np.log(3), rel=1e-14)


def test_least_squares_limit_reached_by_sgd():
    inst = sample_task(P1, 3)
    ls = type(inst)(inst.A, inst.b, np.zeros(10), inst.x0)
    x_star = np.linalg.solve(ls.A.T @ ls.A, -ls.A.T @ ls.b)
    r = ls.A @ x_star + ls.b
    f_star = r @ r
    lr = 0.5 / np.linalg.norm(ls.A, 2) ** 2
    x = ls.x0.copy()
    for _ in range(200_000):
        f, g = eval_loss_grad(ls, x)
        if f - f_star < 1e-9:
            break
        x -= lr * g
    assert f - f_star < 1e-6


def test_synth_dataset_reproducible_and_balanced():
    a, b = synth_dataset(P3), synth_dataset(TaskSpec(family="mlp_classify", layers=(50, 20, 20, 12)))
    assert hashlib.sha256(a.X.tobytes()).hexdigest() == hashlib.sha256(b.X.tobytes()).hexdigest()
    counts = np.bincount(a.y, minlength=a.n_classes)
    n, p = len(a), 1 / a.n_classes
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_mixture_linear_classifier_beats_chance():
    spec = P3
    data = synth_dataset(spec)
    mu = mixture_means(spec)
    # equal isotropic covariances: nearest-mean rule is Bayes-optimal
    scores = data.X @ mu.T - 0.5 * np.sum(mu ** 2, axis=1)
    acc = np.mean(scores.argmax(axis=1) == data.y)
    assert acc > 1.0 / data.n_classes + 0.1


def test_mlp_batch_order_covers_epoch():
    inst = sample_task(SMALL_MLP, 0)
    assert isinstance(inst, MLPInstance)
    per_epoch = 200 // 32
    seen = np.concatenate([inst.batch(s)[1] for s in range(per_epoch)])
    assert seen.size == per_epoch * 32


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.zeros((4, 3, 2), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[2, 1, 1] = 128
    labels = np.array([0, 9, 3, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, imgs)
    write_idx(lp, labels)
    return ip, lp


def test_idx_roundtrip(idx_pair, tmp_path):
    ip, lp = idx_pair
    assert load_idx(ip).shape == (4, 3, 2)
    ds = load_idx_dataset(ip, lp)
    assert ds.X.shape == (4, 6) and len(ds) == 4
    assert ds.X[0, 0] == 1.0 and ds.X.max() <= 1.0 and ds.X.min() >= 0.0
    np.testing.assert_array_equal(ds.y, [0, 9, 3, 1])
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz), load_idx(ip))


def test_idx_errors(idx_pair, tmp_path):
    ip, lp = idx_pair
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x04" + ip.read_bytes()[4:])
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(bad)
    trunc = tmp_path / "trunc.idx"
    trunc.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(trunc)
    short = tmp_path / "short.idx"
    write_idx(short, np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx_dataset(ip, short)
    with pytest.raises(FileNotFoundError):
        sample_task(TaskSpec(family="mlp_classify", dataset="idx_files",
                             idx_images=str(tmp_path / "nope"), idx_labels=str(lp)), 0)


def test_idx_backed_task(idx_pair):
    ip, lp = idx_pair
    spec = TaskSpec(family="mlp_classify", layers=(3,), dataset="idx_files",
                    idx_images=str(ip), idx_labels=str(lp), batch_size=2)
    inst = sample_task(spec, 0)
    assert inst.dim == 6 * 3 + 3 + 3 * 10 + 10
    assert np.isfinite(eval_loss(inst, inst.x0))


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(family="conv")
    with pytest.raises(ValueError):
        TaskSpec(family="rastrigin", dim=0)
    with pytest.raises(ValueError):
        TaskSpec(family="mlp_classify", layers=(5, 0))
