import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symdistill.distill import TrajectoryDB
from symdistill.exprtree import Const, Expression, complexity, parse
from symdistill.interp import (
    InterpReport, interp_report, mc, reference_tpf_mc, sensitivities, tpf, tpf_from_coefficients,
)
from symdistill.symreg import Individual, ParetoFront

T = 20


def _db(n=400, streams=("g",), seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, len(streams), T))
    return TrajectoryDB(streams, T, feats, rng.normal(size=n), np.zeros(n), np.zeros(n), np.zeros(n))


def _linear(coeffs, stream="g"):
    return parse(" + ".join(f"{c!r}*{stream}[{i}]" for i, c in enumerate(coeffs) if c != 0), T)


def test_sgd_tpf_is_zero():
    assert tpf(parse("-0.01*g[0]"), _db()) == {"g": 0.0}


def test_geometric_tpf():
    beta = 0.6
    value = tpf(_linear([beta ** i for i in range(T)]), _db())["g"]
    assert value == pytest.approx(beta / (1 - beta), abs=0.01)


def test_equal_weight_midpoint():
    assert tpf(parse("g[0] + g[4]"), _db())["g"] == pytest.approx(2.0, abs=1e-12)


@given(st.lists(st.floats(-3, 3, allow_subnormal=False), min_size=T, max_size=T))
@settings(max_examples=40, deadline=None)
def test_sensitivity_tpf_equals_direct_for_linear(coeffs):
    coeffs = [c if abs(c) > 1e-6 else 0.0 for c in coeffs]
    if not any(coeffs):
        return
    direct = tpf_from_coefficients(coeffs)
    assert tpf(_linear(coeffs), _db(50))["g"] == pytest.approx(direct, abs=1e-9)


@given(st.floats(0.01, 100))
@settings(max_examples=20, deadline=None)
def test_output_scale_invariance(k):
    db = _db(200)
    e = parse("tanh(g[0]) + 0.5*g[3]*g[1] + exp(0.1*g[7])", T)
    scaled = Expression(parse(f"{k!r}*(tanh(g[0]) + 0.5*g[3]*g[1] + exp(0.1*g[7]))", T).root, T)
    assert tpf(scaled, db)["g"] == pytest.approx(tpf(e, db)["g"], rel=1e-9)


def test_all_zero_sensitivity_is_absent():
    assert tpf_from_coefficients(np.zeros(T)) is None
    assert tpf(parse("0*g[3]"), _db())["g"] is None


def test_tpf_per_stream_range():
    db = _db(streams=("mhat", "ghat"))
    out = tpf(parse("mhat[0] + 0.5*mhat[2] + tanh(ghat[5])"), db)
    assert set(out) == {"mhat", "ghat"}
    assert out["ghat"] == pytest.approx(5.0)
    assert 0 <= out["mhat"] <= T - 1
    sens = sensitivities(parse("mhat[0]"), db)
    assert sens["ghat"].sum() == 0 and sens["mhat"][0] == 1.0


def test_reference_values():
    assert reference_tpf_mc("sgd") == (0.0, 1.0)
    assert reference_tpf_mc("adam", 0.9) == (0.0, 1.0)
    t, m = reference_tpf_mc("momentum", 0.6)
    i0 = math.log(0.05) / math.log(0.6)
    assert i0 == pytest.approx(5.8645, abs=1e-4)
    assert t == pytest.approx(1.5, abs=1e-12)
    assert m == pytest.approx(17.2, abs=0.05)
    assert reference_tpf_mc("momentum", 0.0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        reference_tpf_mc("rmsprop")


def _front(entries):
    front = ParetoFront()
    for expr, r2 in entries:
        e = parse(expr) if isinstance(expr, str) else expr
        front.entries[complexity(e)] = Individual(e, 1 - r2, r2, complexity(e), 0.0, 0.0)
    return front


def test_mc_constant_target():
    front = _front([(Expression(Const(0.0)), 1.0), ("g[0]*0.5", 1.0)])
    assert mc(front) == 1


def test_report_json():
    db = _db()
    front = _front([("-0.01*g[0]", 1.0)])
    rep = interp_report(parse("-0.01*g[0]"), front, db)
    assert isinstance(rep, InterpReport)
    assert rep.tpf == {"g": 0.0} and rep.mc == 3 and rep.tpf_tuple() == (0.0,)
    data = rep.to_json()
    assert data["db"] == db.fingerprint() and data["notes"]
