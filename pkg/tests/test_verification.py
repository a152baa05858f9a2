import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from charflow.characteristics import FlowOptions, Selection, curves_many, lipschitz_along, merged
from charflow.fields import Domain, GraphPoint, ScalarField, TestFunction
from charflow.gallery import gallery
from charflow.verification import (
    CheckRecord, VerificationReport, broad_representative, bump_c1_mass, check_broad,
    distributional_residual, graph_distance, graph_map, holder_vertical_check, intrinsic_lip_constant,
    linear_characteristic, random_bumps, relative_residual,
)

BOX = Domain(0.0, 1.0, -1.0, 1.0)
PLANE = ScalarField.analytic("z + 2*t")
BUMP_MASS = quad(lambda x: math.exp(-1.0 / (1.0 - x * x)), -1, 1)[0]


def test_graph_map_planar():
    v = graph_map(PLANE, (0.5, 0.25))
    assert v.tolist() == pytest.approx([1.0, 0.5, 0.25 - 0.5 * 0.5 * 1.0])


def test_graph_map_higher_dimension():
    f = ScalarField.analytic("z - t")
    A = GraphPoint((1.0, 0.3, 2.0), 0.1)  # planar coordinate is the middle entry
    v = graph_map(f, A, n=2)
    assert v.tolist() == pytest.approx([0.2, 1.0, 0.3, 2.0, 0.1 - 0.5 * 0.3 * 0.2])
    with pytest.raises(ValueError):
        graph_map(f, A, n=1)


def test_graph_distance_closed_form():
    A, B = (0.0, 0.0), (0.5, 1.0)
    fa, fb = 0.0, 2.5
    expected = 0.5 + math.sqrt(abs(1.0 - 0.5 * (fa + fb) * 0.5))
    assert graph_distance(PLANE, A, B) == pytest.approx(expected)


def test_graph_distance_adds_symplectic_term():
    f = ScalarField.constant(0.0)
    A = GraphPoint((1.0, 0.0, 0.0), 0.0)
    B = GraphPoint((0.0, 0.0, 1.0), 0.0)
    # sigma = (z3 z1' - z1 z3') / 2 over the one pair (z1, z3)
    expected = math.sqrt(2.0) + math.sqrt(abs(0.5 * (1.0 * 1.0 - 0.0)))
    assert graph_distance(f, A, B, n=2) == pytest.approx(expected)


pt = st.tuples(st.floats(0, 1), st.floats(-1, 1))


@given(pt, pt)
def test_graph_distance_symmetric_and_nonnegative(A, B):
    d = graph_distance(PLANE, A, B)
    assert d >= 0
    assert d == pytest.approx(graph_distance(PLANE, B, A), abs=1e-12)


@given(pt)
def test_graph_distance_vanishes_on_diagonal(A):
    assert graph_distance(PLANE, A, A) == 0.0


def test_lipschitz_constant_of_constant_field():
    assert intrinsic_lip_constant(ScalarField.constant(0.3), BOX, 500) == 0.0


def test_holder_ratio_of_square_root(ex1):
    ratio, bound = holder_vertical_check(ex1.phi, ex1.domain, 0.5, 5000, seed=3)
    assert bound == 2.0
    assert ratio <= 1.0 + 1e-12
    assert ratio > 0.9


def test_holder_check_is_seeded(ex1):
    assert holder_vertical_check(ex1.phi, ex1.domain, 0.5, 300, 4) == holder_vertical_check(
        ex1.phi, ex1.domain, 0.5, 300, 4)


def test_residual_vanishes_for_smooth_solution():
    phi = ScalarField.analytic("t")
    tf = TestFunction((0.5, 0.2), (0.3, 0.4))
    assert abs(distributional_residual(phi, phi, tf, 129, BOX)) < 1e-7


@pytest.mark.parametrize("center, radii", [((0.5, 0.2), (0.3, 0.4)), ((0.4, -0.3), (0.2, 0.5))])
def test_residual_of_missing_source_matches_integration_by_parts(center, radii):
    # R = int (w - t) tf with w = 0; the bump is symmetric about its centre
    phi = ScalarField.analytic("t")
    tf = TestFunction(center, radii)
    expected = -center[1] * radii[0] * radii[1] * BUMP_MASS ** 2
    assert distributional_residual(phi, ScalarField.constant(0.0), tf, 129, BOX) == pytest.approx(expected, rel=1e-5)


@pytest.mark.parametrize("name", ["ex1", "ex2_collapse", "ex2_split", "appendixA2"])
def test_residual_refinement_decreases_or_is_small(name):
    g = gallery(name)
    for tf in random_bumps(g.domain, 10, seed=7):
        coarse = abs(relative_residual(g.phi, g.w, tf, 129)[1])
        fine = abs(relative_residual(g.phi, g.w, tf, 258)[1])
        assert fine < coarse or fine <= 5e-3


def test_relative_residual_scale():
    phi = ScalarField.analytic("t")
    tf = TestFunction((0.5, 0.2), (0.3, 0.4))
    raw, rel = relative_residual(phi, ScalarField.constant(0.0), tf)
    assert rel == pytest.approx(raw / bump_c1_mass(tf))
    assert bump_c1_mass(tf) > 0


def test_residual_rejects_bumps_outside_domain(ex1):
    with pytest.raises(ValueError):
        distributional_residual(ex1.phi, ex1.w, TestFunction((0.1, 0.0), (0.3, 0.3)))
    with pytest.raises(ValueError):
        distributional_residual(ex1.phi, ex1.w, TestFunction((0.5, 0.0), (0.3, 0.3)), quad_res=8)


@given(st.integers(0, 2 ** 31))
def test_random_bumps_fit_and_are_seeded(seed):
    a = random_bumps(BOX, 5, seed)
    assert all(tf.fits(BOX) for tf in a)
    assert a == random_bumps(BOX, 5, seed)


def test_broad_source_of_split_instance_is_multivalued_on_axis():
    g = gallery("ex2_split")
    w_hat, flags = broad_representative(g.phi, g.domain, (5, 21))
    axis = np.flatnonzero(np.isclose(flags.ts, 0.0))
    assert axis.size == 1
    assert np.all(flags.multivalued[:, axis[0]])
    br = np.sort(flags.branches[:, axis[0]], axis=-1)
    assert np.allclose(br, [[-0.5, 0.5]] * 5, atol=1e-2)
    off = np.abs(flags.ts) > 0.05
    assert np.allclose(w_hat.grid_values[:, off], np.sign(flags.ts[off]) / 2, atol=1e-2)


def test_check_broad_accepts_true_source_and_rejects_zero(ex1):
    curve = merged(ex1.phi, (1.0, 0.25), (0.0, 1.0))
    good = check_broad(ex1.phi, ex1.w_hat_expected, [curve])
    bad = check_broad(ex1.phi, ScalarField.constant(0.0, ex1.domain), [curve])
    assert good.passed and good.checks[0].measured < 1e-2
    assert not bad.passed and bad.checks[0].measured == pytest.approx(0.5, abs=1e-2)


def test_linear_characteristic_formulas():
    z = np.array([1.0, 2.0, 3.0, 4.0, 5.0])  # n = 3
    assert linear_characteristic(3, 1, z, 10.0) == 10.0 - 0.5 * z[3] * z[0]
    assert linear_characteristic(3, 5, z, 10.0) == 10.0 + 0.5 * z[1] * z[4]
    with pytest.raises(ValueError):
        linear_characteristic(3, 3, z, 0.0)
    with pytest.raises(ValueError):
        linear_characteristic(1, 1, [0.0], 0.0)
    with pytest.raises(ValueError):
        linear_characteristic(3, 1, z[:4], 0.0)


@given(m=st.floats(-10, 10), b=st.floats(-10, 10), tol=st.floats(0, 1))
def test_check_record_relations(m, b, tol):
    assert CheckRecord("x", m, b, tol, "<=").passed == (m <= b + tol)
    assert CheckRecord("x", m, b, tol, ">=").passed == (m >= b - tol)
    assert CheckRecord("x", m, b, tol, ">").passed == (m > b - tol)
    assert CheckRecord("x", m, b, tol, "==").passed == (abs(m - b) <= tol)
    assert not CheckRecord("x", math.nan, b, tol).passed


def test_report_json_and_lookup():
    rep = VerificationReport({"instance": "ex1"})
    rep.add(CheckRecord("a", np.float64(0.1), 1.0))
    rep.add(CheckRecord("b", 2.0, 1.0, details={"arr": np.arange(2)}))
    data = json.loads(rep.to_json())
    assert data["passed"] is False
    assert [c["verdict"] for c in data["checks"]] == ["pass", "fail"]
    assert data["checks"][1]["details"]["arr"] == [0, 1]
    assert rep["a"].measured == 0.1
    with pytest.raises(KeyError):
        rep["zzz"]


def test_lipschitz_along_bound_for_random_curves(ex1):
    rng = np.random.default_rng(5)
    s0, t0 = rng.uniform(0, 1, 10), rng.uniform(-1, 1, 10)
    curves, _ = curves_many(ex1.phi, s0, t0, (0.0, 1.0), FlowOptions(), Selection.MAXIMAL,
                            Selection.MINIMAL, Selection.MERGED)
    assert max(lipschitz_along(ex1.phi, c) for c in curves) <= 0.5 + 1e-2
