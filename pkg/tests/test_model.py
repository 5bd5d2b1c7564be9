"""Spec loading, raw evaluation blocks and metric bounds.

Derivative blocks are checked against central finite differences; the
bundled spec files double as schema fixtures.
"""

import json

import numpy as np
import pytest

from ccmkit.model import (
    EvalPoint,
    GridSpec,
    NonFiniteEvalError,
    SpecError,
    bundled_spec_path,
    check_metric_bounds,
    evaluate_raw,
    load_spec,
    load_spec_file,
    metric_evaluator,
    plant_for,
    raw_slice,
    system_evaluator,
)
from conftest import curved_system, grid_of, metric_of, system_of


def test_bundled_specs_load():
    for name in ("counterexample", "double-integrator", "bounded-gain"):
        sf = load_spec_file(bundled_spec_path(name))
        assert sf.name == name
        assert sf.system.n == sf.metric.n
        assert len(sf.grid.x_ranges) == sf.system.n
    sys, met, grid = load_spec(bundled_spec_path("counterexample"))
    assert (sys.n, sys.m) == (1, 1)
    assert met.lam == 0.5
    assert grid.x_ranges == [(-2.0, 2.0, 801)]


def test_bundled_name_unknown():
    with pytest.raises(SpecError, match="bundled"):
        bundled_spec_path("nope")


def _write(tmp_path, doc):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    return p


def _minimal_doc():
    return {
        "schema": 1, "name": "tiny", "n": 1, "m": 1,
        "f": ["-x1"], "B": [["1"]], "M_upper": [["1"]],
        "alpha1": 1.0, "alpha2": 1.0, "lambda": 0.5,
        "grid": {"x": [[-1, 1, 5]], "u": [[0]], "t": [0]},
    }


def test_minimal_spec_loads(tmp_path):
    sf = load_spec_file(_write(tmp_path, _minimal_doc()))
    assert sf.name == "tiny"
    assert sf.scenario is None and sf.transform is None
    assert sf.grid.delta_samples == 16 and sf.grid.seed == 42


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d.pop("schema"), "schema"),
    (lambda d: d.update(schema=2), "schema"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d.pop("f"), "'f'"),
    (lambda d: d.update(f=["-x1", "0"]), "f"),
    (lambda d: d.update(f=["-x1 +"]), "f[0]"),
    (lambda d: d.update(f=["u1"]), "not allowed"),
    (lambda d: d.update(B=[[]]), "B[0]"),
    (lambda d: d.update(M_upper=[["1", "0"]]), "M_upper[0]"),
    (lambda d: d.update(alpha1=0.0), "alpha1"),
    (lambda d: d.update(alpha2=0.5), "alpha2"),
    (lambda d: d.update(**{"lambda": -1.0}), "lambda"),
    (lambda d: d.update(n="one"), "n"),
    (lambda d: d["grid"].pop("x"), "grid.x"),
    (lambda d: d["grid"].update(x=[[1, -1, 5]]), "grid.x[0]"),
    (lambda d: d["grid"].update(x=[[-1, 1, 0]]), "grid.x[0][2]"),
    (lambda d: d["grid"].update(u=[]), "grid.u"),
    (lambda d: d["grid"].update(u=[[0, 0]]), "grid.u[0]"),
    (lambda d: d["grid"].update(bogus=3), "grid"),
    (lambda d: d.update(scenario={"x0": [0]}), "scenario"),
    (lambda d: d.update(scenario={"x0": [0], "x_star": [1], "u_star": [0],
                                  "step": 0}), "scenario.step"),
    (lambda d: d.update(transform={"alpha": ["0"]}), "transform"),
    (lambda d: d.update(transform={"alpha": ["0"], "beta": [["1", "0"]]}),
     "transform.beta"),
])
def test_schema_errors_name_the_field(tmp_path, mutate, fragment):
    doc = _minimal_doc()
    mutate(doc)
    with pytest.raises(SpecError) as ei:
        load_spec_file(_write(tmp_path, doc))
    assert fragment in str(ei.value)


def test_spec_file_not_found(tmp_path):
    with pytest.raises(SpecError, match="not found"):
        load_spec_file(tmp_path / "missing.json")


def test_spec_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(SpecError, match="invalid JSON"):
        load_spec_file(p)


def test_metric_mirror_shares_objects():
    sf = load_spec_file(bundled_spec_path("double-integrator"))
    M = sf.metric.M
    assert M[0][1] is M[1][0]
    # shared objects make evaluated metrics symmetric bitwise
    ev = metric_evaluator(sf.metric)
    X = np.random.default_rng(0).uniform(-2, 2, size=(20, 2))
    arr = ev.M(X, 0.0)
    assert np.array_equal(arr, np.swapaxes(arr, -1, -2))


def test_grid_points_and_deltas():
    grid = grid_of([(-1.0, 1.0, 3), (0.0, 2.0, 2)], [[0.0]])
    X = grid.x_points()
    assert X.shape == (6, 2)
    # meshgrid ij order: the first axis varies slowest
    assert np.array_equal(X[:2, 0], [-1.0, -1.0])
    assert np.array_equal(X[:, 1][:2], [0.0, 2.0])
    d1 = grid.deltas(2)
    d2 = grid.deltas(2)
    assert np.array_equal(d1, d2)              # reproducible
    assert d1.shape == (16, 2)
    assert np.allclose(np.linalg.norm(d1, axis=1), 1.0, atol=1e-14)
    grid.seed = 43
    assert not np.array_equal(grid.deltas(2), d1)


def test_raw_shapes_and_slicing():
    sys, met = curved_system()
    p = EvalPoint(x=np.array([0.3, -0.7]), u=np.array([0.2]), t=0.1,
                  delta=np.array([1.0, 0.0]))
    raw = evaluate_raw(sys, met, p)
    assert raw.f.shape == (2,)
    assert raw.B.shape == (2, 1)
    assert raw.M.shape == (2, 2)
    assert raw.dfdx.shape == (2, 2)
    assert raw.dBdx.shape == (1, 2, 2)
    assert raw.dMdx.shape == (2, 2, 2)
    assert raw.dMdt.shape == (2, 2)
    X = np.stack([p.x, 2 * p.x])
    rb = plant_for(sys, met).raw_batch(X, 0.1)
    r0 = raw_slice(rb, 0)
    assert np.array_equal(r0.f, raw.f)
    assert np.array_equal(r0.dMdx, raw.dMdx)


def test_raw_rejects_bad_shapes():
    sys, met = curved_system()
    with pytest.raises(SpecError, match="x has shape"):
        evaluate_raw(sys, met, EvalPoint(np.zeros(3), np.zeros(1), 0.0, np.zeros(2)))
    with pytest.raises(SpecError, match="u has shape"):
        evaluate_raw(sys, met, EvalPoint(np.zeros(2), np.zeros(2), 0.0, np.zeros(2)))


def test_derivative_blocks_match_finite_differences():
    sys, met = curved_system()
    plant = plant_for(sys, met)
    rng = np.random.default_rng(17)
    h = 1e-6
    for _ in range(25):
        x = rng.uniform(-1.5, 1.5, size=2)
        t = float(rng.uniform(0.0, 2.0))
        raw = plant.raw(x, t)
        for k in range(2):
            dx = np.zeros(2)
            dx[k] = h
            up = plant.raw(x + dx, t)
            dn = plant.raw(x - dx, t)
            fd_f = (up.f - dn.f) / (2 * h)
            assert np.allclose(raw.dfdx[:, k], fd_f, atol=1e-6, rtol=1e-6)
            fd_B = (up.B - dn.B) / (2 * h)
            assert np.allclose(raw.dBdx[:, :, k].T, fd_B, atol=1e-6, rtol=1e-6)
            fd_M = (up.M - dn.M) / (2 * h)
            assert np.allclose(raw.dMdx[k], fd_M, atol=1e-6, rtol=1e-6)
        up = plant.raw(x, t + h)
        dn = plant.raw(x, t - h)
        assert np.allclose(raw.dMdt, (up.M - dn.M) / (2 * h), atol=1e-6)


def test_jacobian_orientations():
    # dfdx[i, j] = d f_i / d x_j and dBdx[i] is the Jacobian of column i
    sys = system_of(["x2", "0"], [["x2"], ["x1"]])
    met = metric_of([["1", "0"], ["1"]], 1.0, 1.0, 0.5)
    raw = plant_for(sys, met).raw(np.array([2.0, 3.0]), 0.0)
    assert np.array_equal(raw.dfdx, [[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(raw.dBdx[0], [[0.0, 1.0], [1.0, 0.0]])


def test_non_finite_flagged_with_entry_name():
    sys = system_of(["1/x1"], [["1"]])
    met = metric_of([["1"]], 1.0, 1.0, 0.5)
    with pytest.raises(NonFiniteEvalError) as ei:
        evaluate_raw(sys, met, EvalPoint(np.array([0.0]), np.zeros(1), 0.0,
                                         np.zeros(1)))
    msg = str(ei.value)
    assert "f[0]" in msg and "x=[0.0]" in msg

    met_bad = metric_of([["1/(x1 - 1)"]], 1.0, 1.0, 0.5)
    sys_ok = system_of(["-x1"], [["1"]])
    with pytest.raises(NonFiniteEvalError) as ei:
        evaluate_raw(sys_ok, met_bad, EvalPoint(np.array([1.0]), np.zeros(1), 0.0,
                                                np.zeros(1)))
    assert "M[0][0]" in str(ei.value)


def test_evaluator_caches():
    sys, met = curved_system()
    assert system_evaluator(sys) is system_evaluator(sys)
    assert metric_evaluator(met) is metric_evaluator(met)
    assert plant_for(sys, met) is plant_for(sys, met)


def test_metric_bounds_pass_and_fail():
    met = metric_of([["1", "0"], ["2 + sin(x1)"]], 1.0, 3.0, 0.5)
    grid = grid_of([(-2.0, 2.0, 41), (-1.0, 1.0, 3)], [[0.0]])
    res = check_metric_bounds(met, grid)
    assert res.passed
    assert res.min_eig == pytest.approx(1.0, abs=1e-12)
    # sin peaks at x1 = pi/2, off this grid; the max is at the nearest node
    xs = np.linspace(-2, 2, 41)
    assert res.max_eig == pytest.approx(2 + np.max(np.sin(xs)), abs=1e-12)
    assert res.argmax["x"][0] == pytest.approx(xs[np.argmax(np.sin(xs))])

    tight = metric_of([["1", "0"], ["2 + sin(x1)"]], 1.5, 3.0, 0.5)
    res = check_metric_bounds(tight, grid)
    assert not res.passed
    assert res.min_eig < 1.5 - res.tol

    low = metric_of([["1", "0"], ["2 + sin(x1)"]], 1.0, 2.5, 0.5)
    assert not check_metric_bounds(low, grid).passed


def test_metric_bounds_to_dict_serializes():
    met = metric_of([["1"]], 1.0, 1.0, 0.5)
    grid = grid_of([(-1.0, 1.0, 3)], [[0.0]])
    d = check_metric_bounds(met, grid).to_dict()
    json.dumps(d)
    assert d["passed"] is True


def test_scenario_and_transform_blocks(tmp_path):
    doc = _minimal_doc()
    doc["scenario"] = {"x0": [0.0], "x_star": [1.0], "u_star": [1.0],
                       "horizon": 5.0, "step": 0.01, "segments": 64}
    doc["transform"] = {"alpha": ["-x1"], "beta": [["2"]]}
    sf = load_spec_file(_write(tmp_path, doc))
    sc = sf.scenario
    assert np.array_equal(sc.x0, [0.0]) and np.array_equal(sc.x_star, [1.0])
    assert sc.horizon == 5.0 and sc.step == 0.01 and sc.segments == 64
    assert len(sf.transform["alpha"]) == 1
    assert len(sf.transform["beta"][0]) == 1


def test_xdot():
    sys, met = curved_system()
    plant = plant_for(sys, met)
    x = np.array([0.5, -0.5])
    u = np.array([2.0])
    got = plant.xdot(x, u, 0.0)
    raw = plant.raw(x, 0.0)
    assert np.allclose(got, raw.f + raw.B @ u, atol=1e-15)
