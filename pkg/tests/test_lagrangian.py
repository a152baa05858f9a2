import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from charflow.characteristics import Characteristic, FlowOptions
from charflow.fields import Domain, ScalarField
from charflow.gallery import gallery
from charflow.lagrangian import (
    FULL, PARTIAL, ExtensionTrace, LagrangianParam, ParamError, _bump_kernel, apply_injection,
    build_full_param, build_minimal_param, covered_length_ledger, dyadic_enumeration, dyadic_sections,
    extend_param, lagrangian_source, mollify_param, param_lip_profile, theta_encode, theta_lookup,
)

BOX = Domain(0.0, 1.0, -1.0, 1.0)
COARSE = FlowOptions(h=0.01)


def _curve(gamma, n=101):
    s = np.linspace(0.0, 1.0, n)
    return Characteristic(s, gamma(s), s[1] - s[0], 0.0)


def test_dyadic_enumeration_order():
    assert dyadic_enumeration(8).tolist() == [0, 1, 0.5, 0.25, 0.75, 0.125, 0.375, 0.625, 0.875]


def test_dyadic_sections_cover_each_level():
    secs = list(dyadic_sections(3))
    assert [(n, h) for n, h, _ in secs] == [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2), (3, 3)]
    assert [s for *_, s in secs] == [0.5, 0.25, 0.75, 0.125, 0.375, 0.625, 0.875]


def test_theta_of_constant_curves():
    assert theta_encode(_curve(np.zeros_like)) == 0.0
    assert theta_encode(_curve(np.ones_like), K=30) == 2 - 2.0 ** -30


def test_theta_of_identity_matches_exact_sum():
    K = 20
    exact = sum(Fraction(2) ** -k * Fraction(r) for k, r in enumerate(dyadic_enumeration(K)))
    assert theta_encode(_curve(lambda s: s), K=K) == pytest.approx(float(exact), abs=1e-15)


def test_theta_needs_the_whole_interval():
    s = np.linspace(0.0, 0.5, 11)
    with pytest.raises(ParamError):
        theta_encode(Characteristic(s, s, 0.05, 0.0))


@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(0, 0.5), min_size=5, max_size=5))
def test_theta_preserves_pointwise_order(base, bump):
    s = np.linspace(0, 1, 5)
    lo = np.interp(np.linspace(0, 1, 101), s, base)
    hi = lo + np.interp(np.linspace(0, 1, 101), s, bump)
    a, b = theta_encode(_curve(lambda _: lo)), theta_encode(_curve(lambda _: hi))
    assert a <= b
    if max(bump) > 1e-9:
        assert a < b


def _loop_injection(inj, tau):
    out = []
    for x in tau:
        extra = sum(o for p, o in zip(inj["breakpoints"], inj["openings"]) if p < x)
        out.append(inj["scale"] * (x + extra))
    return np.array(out)


injections = st.builds(
    lambda bp, op, sc: {"breakpoints": sorted(bp), "openings": op[:len(bp)], "scale": sc},
    st.lists(st.floats(0, 2), min_size=3, max_size=3, unique=True),
    st.lists(st.floats(0.0, 0.5), min_size=3, max_size=3),
    st.floats(0.1, 1.0),
)


@given(injections, st.lists(st.floats(0, 2), min_size=1, max_size=20))
def test_injection_matches_loop_and_is_monotone(inj, tau):
    tau = np.sort(np.array(tau))
    got = apply_injection(inj, tau)
    assert np.allclose(got, _loop_injection(inj, tau), atol=1e-12)
    assert np.all(np.diff(got) >= 0)
    distinct = np.diff(tau) > 0
    assert np.all(np.diff(got)[distinct] > 0)


def test_trace_json_round_trip_and_compose():
    steps = [{"n": 1, "growth": 0.1, "injection": {"breakpoints": [0.5], "openings": [0.2], "scale": 0.5}},
             {"n": 1, "growth": 0.05, "injection": {"breakpoints": [0.1], "openings": [0.1], "scale": 1.0}}]
    tr = ExtensionTrace(steps)
    back = ExtensionTrace.from_json(tr.to_json())
    assert back.steps == steps
    assert tr.growth_by_level() == {1: pytest.approx(0.15)}
    # 0.75 -> 0.5 * (0.75 + 0.2) = 0.475 -> 1.0 * (0.475 + 0.1)
    assert tr.compose([0.75]).tolist() == pytest.approx([0.575])
    assert tr.compose([0.75], start=1).tolist() == pytest.approx([0.85])


def test_bump_kernel_is_normalised_and_symmetric():
    k = _bump_kernel(0.05, 0.001)
    assert k.sum() == pytest.approx(1.0)
    assert np.allclose(k, k[::-1])
    with pytest.raises(ParamError):
        _bump_kernel(1e-4, 1e-3)


def test_minimal_param_of_constant_field_is_translates():
    phi = ScalarField.analytic("0.3 + 0*t", BOX)
    p = build_minimal_param(phi, BOX, 11, COARSE)
    assert p.kind == PARTIAL and p.shape == (101, 11)
    expected = np.minimum(p.launch_val[None, :] + 0.3 * p.s_grid[:, None], 1.0)
    # the finest shift lowers the slope by eps
    assert np.allclose(p.chi, expected, atol=COARSE.eps(COARSE.eps_levels) + 1e-12, rtol=0)
    assert np.allclose(p.tau, np.linspace(0, 1, 11))


@settings(max_examples=10)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1), k=st.floats(0.5, 4))
def test_minimal_param_sections_are_monotone(a, b, k):
    phi = ScalarField.analytic(f"{a} * sin({k} * t) + {b} * z", BOX)
    p = build_minimal_param(phi, BOX, 41, COARSE)
    assert p.monotonicity_violations() == 0


def test_param_csv_round_trip(tmp_path):
    phi = ScalarField.analytic("0.3 + 0*t", BOX)
    p = build_minimal_param(phi, BOX, 5, COARSE)
    path = tmp_path / "p.csv"
    p.to_csv(path)
    s, tau, chi = LagrangianParam.read_csv(path)
    assert np.array_equal(s, p.s_grid) and np.array_equal(tau, p.tau) and np.array_equal(chi, p.chi)


def test_lip_profile_by_hand():
    s = np.linspace(0, 1, 3)
    chi = np.array([[0.0, 0.1, 0.5]] * 3)
    p = LagrangianParam(None, BOX, s, [0.0, 0.5, 0.6], chi)
    assert param_lip_profile(p, 0.5, chi_tol=0.0) == pytest.approx(4.0)
    assert param_lip_profile(p, 0.5, chi_tol=0.1) == pytest.approx(3.0)


def test_covered_length_ledger_clips_to_bands():
    tr = ExtensionTrace([
        {"n": 0, "gaps": [[-1.0, 0.0]]},
        {"n": 1, "gaps": [[-0.6, -0.4], [-0.1, 0.0]]},
        {"n": 2, "gaps": [[-0.45, -0.35]]},
    ])
    bands = [(-0.5, 0.0), (-1.0, -0.5)]
    assert covered_length_ledger(tr, bands).tolist() == pytest.approx([0.1 + 0.1 + 0.1, 0.1])


def test_split_instance_keeps_both_parabolas():
    g = gallery("ex2_split")
    p = build_full_param(g.phi, g.domain, 17)
    s = p.s_grid
    for sign in (1, -1):
        d = np.max(np.abs(p.chi - sign * s[:, None] ** 2 / 4), axis=0)
        assert d.min() < 2e-3
    up = np.argmin(np.max(np.abs(p.chi - s[:, None] ** 2 / 4), axis=0))
    down = np.argmin(np.max(np.abs(p.chi + s[:, None] ** 2 / 4), axis=0))
    assert p.tau[up] > p.tau[down]


def test_full_param_of_ex1(ex1_full):
    p = ex1_full
    assert p.kind == FULL
    assert 0.0 <= p.tau[0] and p.tau[-1] <= 2.0
    assert np.all(np.diff(p.tau) > 0)
    assert p.monotonicity_violations() == 0
    j = theta_lookup(p, p.tau[100] + 1e-15)
    assert j == 100
    assert theta_lookup(p, -5.0) == 0 and theta_lookup(p, 5.0) == len(p.tau) - 1


def test_extend_leaves_full_params_alone(ex1_full):
    assert extend_param(ex1_full, 2) is ex1_full
    with pytest.raises(ParamError):
        extend_param(ex1_full, 0)


def test_minimal_param_extension_keeps_old_columns():
    g = gallery("appendixA2")
    opts = FlowOptions(h=2.0 ** -10, eps0=1e-3, eps_levels=2)
    p = build_minimal_param(g.phi, g.domain, 256, opts, include_terminal=True)
    q = extend_param(p, 2)
    new_tau = q.trace.compose(p.tau, start=len(p.trace.steps))
    idx = np.searchsorted(q.tau, new_tau)
    assert np.array_equal(q.tau[idx], new_tau)
    assert np.array_equal(q.chi[:, idx], p.chi)
    assert q.monotonicity_violations() == 0
    for n, g_n in q.trace.growth_by_level().items():
        if n >= 1:
            assert g_n <= 2.0 ** (1 - 2 * n)


def test_mollify_requires_full_param():
    phi = ScalarField.analytic("0.3 + 0*t", BOX)
    with pytest.raises(ParamError):
        mollify_param(build_minimal_param(phi, BOX, 5, COARSE), 0.1)


def test_mollify_rejects_wide_kernel(ex1_full):
    with pytest.raises(ParamError):
        mollify_param(ex1_full, 1.0)


def test_lagrangian_source_of_ex1(ex1_full):
    w, multi, reached = lagrangian_source(ex1_full, return_reached=True)
    ts = np.linspace(-1, 1, 201)
    vals = w.grid_values
    rows = slice(100, 900)
    off = (np.abs(ts) > 0.05) & (np.abs(ts) < 0.95)
    ok = reached[rows][:, off] & ~multi[rows][:, off]
    target = np.broadcast_to(np.sign(ts[off]) / 2, ok.shape)
    assert ok.mean() > 0.9
    assert np.max(np.abs(vals[rows][:, off] - target)[ok]) < 5e-2


def test_trace_is_json_serialisable():
    g = gallery("appendixA2")
    p = build_minimal_param(g.phi, g.domain, 64, FlowOptions(h=2.0 ** -10, eps0=1e-3, eps_levels=2),
                            include_terminal=True)
    data = json.loads(p.trace.to_json())
    assert data["steps"][0]["n"] == 0 and data["steps"][0]["injection"]["scale"] > 0
