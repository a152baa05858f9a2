import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from charflow.gallery import (
    BLOCK_LEVELS, NAMES, UnknownInstance, accumulation_point, block_nodes, block_peak, gallery, level_gap,
    sub_nodes,
)


def test_names_and_unknown_instance():
    assert NAMES == ("ex1", "ex2_collapse", "ex2_split", "appendixA2")
    with pytest.raises(UnknownInstance) as exc:
        gallery("nope")
    for name in NAMES:
        assert name in str(exc.value)


def test_ex1_source_value():
    assert gallery("ex1").w(0.5, 0.3) == 0.5
    assert gallery("ex1").w(0.5, -0.3) == -0.5


@pytest.mark.parametrize("name, t, expected", [
    ("ex1", 0.25, 0.5), ("ex1", -0.25, 0.5),
    ("ex2_collapse", 0.25, -0.5), ("ex2_collapse", -0.25, 0.5),
    ("ex2_split", 0.25, 0.5), ("ex2_split", -0.25, -0.5),
])
def test_closed_form_fields(name, t, expected):
    assert gallery(name).phi(0.3, t) == pytest.approx(expected)


def test_node_constants_against_direct_sums():
    nodes = block_nodes()
    direct = [-math.fsum(2.0 ** -j / math.log(j + 2) for j in range(1, i + 1)) for i in range(BLOCK_LEVELS + 1)]
    assert nodes == pytest.approx(direct, abs=1e-15)
    assert nodes[1:4] == pytest.approx([-0.455, -0.635, -0.713], abs=5e-4)


def test_sub_nodes_split_each_band_evenly():
    for i in range(1, 6):
        z = sub_nodes(i)
        nodes = block_nodes(i)
        assert len(z) == 2 ** i + 1
        assert z[0] == pytest.approx(nodes[i - 1]) and z[-1] == pytest.approx(nodes[i])
        assert np.allclose(np.diff(z), -level_gap(i) / 2 ** i)


def test_accumulation_point_limits_nodes():
    assert accumulation_point() < block_nodes()[-1]
    assert block_nodes()[-1] - accumulation_point() < 2.0 ** -BLOCK_LEVELS
    assert gallery("appendixA2").domain.t_lo == accumulation_point()


@pytest.mark.parametrize("i", range(1, 7))
def test_block_phi_is_bounded_per_level(i):
    g = gallery("appendixA2")
    nodes = block_nodes()
    t = np.linspace(nodes[i], nodes[i - 1], 4001)
    v = g.phi.values(np.full_like(t, 0.5), t)
    assert v.max() <= block_peak(i) * (1 + 1e-9)
    assert v.max() >= 0.99 * block_peak(i)
    assert v.min() >= 0.0


def test_block_phi_depends_on_t_only_and_vanishes_at_nodes():
    g = gallery("appendixA2")
    nodes = block_nodes()
    for z in (0.0, 0.4, 1.0):
        assert np.allclose(g.phi.values(np.full(5, z), nodes[:5]), 0.0, atol=1e-12)
    t = np.linspace(nodes[3], 0.0, 50)
    assert np.array_equal(g.phi.values(np.full_like(t, 0.1), t), g.phi.values(np.full_like(t, 0.9), t))


@given(st.integers(1, 4), st.floats(0.05, 0.95))
def test_block_source_is_transport_of_phi(i, frac):
    # phi does not depend on z, so the balance law reduces to w = phi dphi/dt
    g = gallery("appendixA2")
    sub = sub_nodes(i)
    a, b = sub[1], sub[0]  # first block of level i
    t = b + frac * (a - b)
    d = 1e-7 * (b - a)
    dphi = (g.phi(0.5, t + d) - g.phi(0.5, t - d)) / (2 * d)
    assert g.w(0.5, t) == pytest.approx(g.phi(0.5, t) * dphi, rel=1e-4, abs=1e-6)


def test_phi_is_zero_below_the_last_level():
    g = gallery("appendixA2")
    t = np.linspace(g.domain.t_lo, block_nodes()[-1], 20)
    assert np.all(g.phi.values(np.zeros_like(t), t) == 0.0)


def test_summary_lists_domain_and_notes():
    s = gallery("appendixA2").summary()
    assert s["domain"]["t_hi"] == 0.0 and s["nodes"][0] == 0.0
    assert "w_hat_expected" in gallery("ex1").summary()
    assert "w_hat_expected" not in gallery("ex2_split").summary()
