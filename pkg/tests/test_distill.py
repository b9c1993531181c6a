import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symdistill.distill import (
    DBError, DistillReport, TrajectoryDB, distill, generate_db, replay_output, select_equation, subsample,
)
from symdistill.exprtree import Expression, Const, parse, render
from symdistill.l2o_teacher import TeacherConfig, TeacherModel
from symdistill.optimizers import ClassicalConfig
from symdistill.symreg import Individual, ParetoFront, SRConfig
from symdistill.tasks import TaskSpec

P1_SMALL = TaskSpec(family="rastrigin", dim=6, seed=0)
SGD = ClassicalConfig("sgd", lr=0.01)


@pytest.fixture(scope="module")
def sgd_db():
    return generate_db(SGD, P1_SMALL, n=300, seed=0, steps_per_task=40)


def test_sgd_records_are_scaled_gradients(sgd_db):
    assert len(sgd_db) == 300
    np.testing.assert_array_equal(sgd_db.out, -0.01 * sgd_db.features[:, 0, 0])
    assert np.all(sgd_db.t >= sgd_db.horizon - 1)


def test_scaled_streams_have_unit_variance(sgd_db):
    X = sgd_db.scaled_matrix()
    assert np.var(X) == pytest.approx(1.0, abs=1e-6)
    assert np.var(sgd_db.scaled_out()) == pytest.approx(1.0, abs=1e-6)


def test_variance_four_gives_scale_two():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4000, 1, 20))
    z = (z - z.mean()) / z.std() * 2.0
    db = TrajectoryDB(("g",), 20, z, rng.normal(size=4000), np.zeros(4000), np.zeros(4000), np.zeros(4000))
    assert db.scales["g"] == pytest.approx(2.0, rel=1e-12)
    assert np.var(db.scaled_matrix()) == pytest.approx(1.0, abs=1e-6)


def test_fingerprint_is_deterministic(sgd_db):
    again = generate_db(SGD, P1_SMALL, n=300, seed=0, steps_per_task=40)
    assert again.fingerprint() == sgd_db.fingerprint()
    other = generate_db(SGD, P1_SMALL, n=300, seed=1, steps_per_task=40)
    assert other.fingerprint() != sgd_db.fingerprint()


def test_jsonl_roundtrip(tmp_path, sgd_db):
    path = tmp_path / "db.jsonl"
    sgd_db.to_jsonl(path)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"task", "t", "coord", "streams", "out"}
    assert len(first["streams"]["g"]) == 20
    back = TrajectoryDB.from_jsonl(path)
    assert back.fingerprint() == sgd_db.fingerprint()
    np.testing.assert_array_equal(back.features, sgd_db.features)
    with pytest.raises(DBError):
        TrajectoryDB.from_jsonl(path, horizon=10)


def test_empty_jsonl_raises(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DBError):
        TrajectoryDB.from_jsonl(path)


def test_replay_reproduces_teacher_outputs():
    model = TeacherModel.init(TeacherConfig("rp_small_extra"), seed=3)
    db = generate_db(model, P1_SMALL, n=200, seed=0, steps_per_task=30)
    assert db.streams == ("mhat", "ghat", "nhat")
    rng = np.random.default_rng(0)
    for i in rng.choice(len(db), size=20, replace=False):
        assert replay_output(model, P1_SMALL, int(db.task[i]), int(db.t[i]), int(db.coord[i])) == db.out[i]


def test_replay_classical(sgd_db):
    for i in range(0, 300, 37):
        assert replay_output(SGD, P1_SMALL, int(sgd_db.task[i]), int(sgd_db.t[i]), int(sgd_db.coord[i])) == sgd_db.out[i]


def test_all_diverged_raises():
    huge = ClassicalConfig("sgd", lr=1e4)
    with pytest.raises(DBError):
        generate_db(huge, P1_SMALL, n=10, steps_per_task=40, max_tasks=3)


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_db(SGD, P1_SMALL, n=0)
    with pytest.raises(ValueError):
        generate_db(SGD, P1_SMALL, n=5, steps_per_task=5)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_fold_back_matches_scaled(seed):
    rng = np.random.default_rng(seed)
    n = 200
    feats = rng.normal(size=(n, 2, 20)) * np.array([3.0, 0.2])[None, :, None]
    db = TrajectoryDB(("mhat", "ghat"), 20, feats, rng.normal(size=n) * 5, np.zeros(n), np.zeros(n), np.zeros(n))
    scaled = parse("0.3*tanh(mhat[0]) + ghat[2]*mhat[1] - 0.7*sq(ghat[0])")
    raw = db.to_original_units(scaled)
    y_scaled = scaled.compile(db.streams).eval(db.scaled_matrix()) * db.out_scale
    y_raw = raw.compile(db.streams).eval(db.raw_matrix())
    np.testing.assert_allclose(y_raw, y_scaled, rtol=1e-9, atol=1e-12)


def _front(points):
    front = ParetoFront()
    for c, r2 in points:
        front.entries[c] = Individual(Expression(Const(float(c))), 1 - r2, r2, c, 0.0, 0.0)
    return front


def test_selection_examples():
    single = _front([(7, 0.4)])
    assert select_equation(single)[1] == 7
    front = _front([(3, 0.99), (50, 0.995)])
    ind, mc = select_equation(front, 0.05)
    assert mc == 3 and ind.r2 == 0.99
    assert select_equation(front, 0.0)[1] == 50
    with pytest.raises(ValueError):
        select_equation(ParetoFront())


@given(st.lists(st.tuples(st.integers(1, 60), st.floats(-1, 1)), min_size=1, max_size=12, unique_by=lambda p: p[0]),
       st.floats(0, 0.5), st.floats(0, 0.5))
def test_selection_monotone_in_delta(points, d1, d2):
    front = _front(points)
    lo, hi = sorted((d1, d2))
    assert select_equation(front, hi)[1] <= select_equation(front, lo)[1]


def test_distill_sgd_end_to_end(sgd_db):
    report = distill(sgd_db, SRConfig(iterations=40, population=60, seed=0))
    assert report.selected_r2 >= 0.999
    assert report.mc <= 5
    y = report.selected.compile(sgd_db.streams).eval(sgd_db.raw_matrix())
    np.testing.assert_allclose(y, sgd_db.out, rtol=1e-6, atol=1e-12)
    data = report.to_json()
    assert data["db_fingerprint"] == sgd_db.fingerprint()
    back = DistillReport.from_json(json.loads(json.dumps(data)))
    assert render(back.selected) == render(report.selected)
    assert back.mc == report.mc


def test_subsample_keeps_records(sgd_db):
    sub = subsample(sgd_db, 50, seed=2)
    assert len(sub) == 50
    np.testing.assert_array_equal(sub.out, -0.01 * sub.features[:, 0, 0])
