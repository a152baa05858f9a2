"""Metric and weak-form checks: graph map, graph quasidistance, Lipschitz and
Hölder estimates, distributional residuals and the broad source."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import simpson, trapezoid

from .characteristics import (
    Characteristic, FlowOptions, Selection, _windows, branch_rows, curves_many, lipschitz_along,
)
from .fields import Domain, GraphPoint, ScalarField, TestFunction, as_point, sup_norm

__all__ = [
    "GraphPoint", "CheckRecord", "VerificationReport", "graph_map", "graph_distance",
    "intrinsic_lip_constant", "holder_vertical_check", "distributional_residual", "bump_c1_mass",
    "relative_residual", "random_bumps", "broad_representative", "BroadFlags", "check_broad", "linear_characteristic",
]


@dataclass
class CheckRecord:
    name: str
    measured: float
    bound: float
    tolerance: float = 0.0
    relation: str = "<="
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        m, b, tol = self.measured, self.bound, self.tolerance
        if not math.isfinite(m):
            return False
        if self.relation == "<=":
            return m <= b + tol
        if self.relation == ">=":
            return m >= b - tol
        if self.relation == ">":
            return m > b - tol
        return abs(m - b) <= tol

    def to_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured, "bound": self.bound,
                "tolerance": self.tolerance, "relation": self.relation,
                "verdict": "pass" if self.passed else "fail", "details": self.details}


@dataclass
class VerificationReport:
    """Named check records plus where the instance came from."""

    provenance: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def add(self, record: CheckRecord) -> CheckRecord:
        self.checks.append(record)
        return record

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# graph geometry


def _phi_at(phi, A: GraphPoint) -> float:
    return float(phi.values(*A.planar))


def graph_map(phi: ScalarField, A, n: int = 1) -> np.ndarray:
    """Image of ``A`` on the graph: ``(phi, z, t - z_n phi / 2)``."""
    A = as_point(A)
    if A.n != n:
        raise ValueError(f"point has n={A.n}, expected {n}")
    f = _phi_at(phi, A)
    z = A.zvec
    return np.concatenate([[f], z, [A.t - 0.5 * z[n - 1] * f]])


def _sigma(z, zp, n):
    j = np.arange(n - 1)
    return 0.5 * float(np.sum(z[j + n] * zp[j] - z[j] * zp[j + n]))


def graph_distance(phi: ScalarField, A, B, n: int = 1) -> float:
    """Graph quasidistance ``|dz| + |dt - (phi_A + phi_B) dz_n / 2 + sigma|^(1/2)``."""
    A, B = as_point(A), as_point(B)
    if A.n != n or B.n != n:
        raise ValueError(f"points must have n={n}")
    za, zb = A.zvec, B.zvec
    fa, fb = _phi_at(phi, A), _phi_at(phi, B)
    dz = zb - za
    vert = B.t - A.t - 0.5 * (fa + fb) * dz[n - 1]
    if n >= 2:
        vert += _sigma(za, zb, n)
    return float(np.linalg.norm(dz)) + math.sqrt(abs(vert))


def _graph_distance_planar(fa, fb, za, ta, zb, tb):
    dz = zb - za
    return np.abs(dz) + np.sqrt(np.abs(tb - ta - 0.5 * (fa + fb) * dz))


def _lattice_points(rng, domain: Domain, count: int, lattice: int):
    """Random nodes of a uniform lattice (so special rows such as t = 0 get hit)."""
    zs, ts = domain.lattice(lattice)
    return zs[rng.integers(0, lattice, count)], ts[rng.integers(0, lattice, count)]


def intrinsic_lip_constant(phi: ScalarField, domain: Domain, pairs: int, seed: int = 0,
                           lattice: int = 129) -> float:
    """Max of ``|phi(A) - phi(B)| / d_phi(A, B)`` over seeded random pairs.

    Points are random nodes of a ``lattice x lattice`` grid; one pair in
    three is vertical (same z), where the quasidistance is tightest.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    za, ta = _lattice_points(rng, domain, pairs, lattice)
    zb, tb = _lattice_points(rng, domain, pairs, lattice)
    vertical = np.arange(pairs) % 3 == 0
    zb = np.where(vertical, za, zb)
    fa, fb = phi.values(za, ta), phi.values(zb, tb)
    d = _graph_distance_planar(fa, fb, za, ta, zb, tb)
    ok = d > 0
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(fa - fb)[ok] / d[ok]))


def holder_vertical_check(phi: ScalarField, domain: Domain, L: float, pairs: int, seed: int = 0,
                          lattice: int = 129) -> tuple[float, float]:
    """Max of ``|phi(z, t1) - phi(z, t2)| / |t1 - t2|^(1/2)`` over close vertical pairs.

    Pairs are restricted to ``|t1 - t2| <= r0 = min(height, width^4 / 16)``.
    Returns ``(max_ratio, 2 sqrt(2 L))``.
    """
    r0 = min(domain.height, domain.width ** 4 / 16.0)
    rng = np.random.default_rng(seed)
    z, t1 = _lattice_points(rng, domain, pairs, lattice)
    # partner: a random lattice offset within r0, reflected to stay inside
    dt = domain.height / (lattice - 1)
    kmax = max(1, int(r0 / dt))
    off = rng.integers(1, kmax + 1, pairs) * dt * np.where(rng.random(pairs) < 0.5, -1.0, 1.0)
    t2 = t1 + off
    t2 = np.where((t2 < domain.t_lo) | (t2 > domain.t_hi), t1 - off, t2)
    t2 = np.clip(t2, domain.t_lo, domain.t_hi)
    gap = np.abs(t1 - t2)
    ok = (gap > 0) & (gap <= r0 * (1 + 1e-12))
    bound = 2.0 * math.sqrt(2.0 * L)
    if not ok.any():
        return 0.0, bound
    ratio = np.abs(phi.values(z[ok], t1[ok]) - phi.values(z[ok], t2[ok])) / np.sqrt(gap[ok])
    return float(ratio.max()), bound


# ---------------------------------------------------------------------------
# weak form


def _quad_lattice(tf: TestFunction, quad_res: int):
    if quad_res < 16:
        raise ValueError("quad_res must be >= 16")
    sup = tf.support
    zs, ts = sup.lattice(quad_res)
    Z, T = np.meshgrid(zs, ts, indexing="ij")
    return zs, ts, Z, T


def _integrate2(F, zs, ts):
    return float(simpson(simpson(F, x=ts, axis=1), x=zs))


def distributional_residual(phi: ScalarField, w: ScalarField, tf: TestFunction, quad_res: int = 129,
                            domain: Domain | None = None) -> float:
    """``R = int phi d_z(tf) + phi^2/2 d_t(tf) + w tf`` by 2D composite Simpson."""
    dom = domain or phi.domain
    if dom is not None and not tf.fits(dom):
        raise ValueError("test function support leaves the domain")
    zs, ts, Z, T = _quad_lattice(tf, quad_res)
    v, dz, dt = tf.evaluate(Z, T)
    f = phi.values(Z, T)
    F = f * dz + 0.5 * f * f * dt + w.values(Z, T) * v
    return _integrate2(F, zs, ts)


def bump_c1_mass(tf: TestFunction, quad_res: int = 129) -> float:
    """``int |tf| + |d_z tf| + |d_t tf|`` (scale for relative residuals)."""
    zs, ts, Z, T = _quad_lattice(tf, quad_res)
    v, dz, dt = tf.evaluate(Z, T)
    return _integrate2(np.abs(v) + np.abs(dz) + np.abs(dt), zs, ts)


def relative_residual(phi, w, tf, quad_res: int = 129) -> tuple[float, float]:
    """``(raw, raw / C1 mass)``."""
    r = distributional_residual(phi, w, tf, quad_res)
    return r, r / bump_c1_mass(tf, quad_res)


def random_bumps(domain: Domain, count: int, seed: int = 0, max_radius: float = 0.45) -> list[TestFunction]:
    """Seeded bumps whose support fits the domain."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        rz = rng.uniform(0.1, max_radius) * domain.width
        rt = rng.uniform(0.1, max_radius) * domain.height
        zc = rng.uniform(domain.z_lo + rz, domain.z_hi - rz)
        tc = rng.uniform(domain.t_lo + rt, domain.t_hi - rt)
        out.append(TestFunction((zc, tc), (rz, rt)))
    return out


# ---------------------------------------------------------------------------
# broad source


@dataclass
class BroadFlags:
    """Per-node diagnostics of :func:`broad_representative`.

    ``status``: 0 value found, 1 multivalued (value = minimal branch), 2 failure.
    ``branches`` holds (minimal, maximal) forward limits at multivalued nodes.
    """

    zs: np.ndarray
    ts: np.ndarray
    status: np.ndarray
    branches: np.ndarray
    messages: dict = field(default_factory=dict)

    @property
    def multivalued(self) -> np.ndarray:
        return self.status == 1

    @property
    def failed(self) -> np.ndarray:
        return self.status == 2

    @property
    def flagged(self) -> np.ndarray:
        return self.status != 0


def _cell_centres(lo, hi, n):
    d = (hi - lo) / n
    return lo + d * (np.arange(n) + 0.5)


def _one_sided(F, n_valid, h, levels, tol, min_width):
    """Vectorised one-sided limits of ``(F[:, m] - F[:, 0]) / (m h)``.

    NaN where the quotients do not settle; ``has_room`` marks rows with
    room for at least ``levels`` windows.
    """
    m_rows = F.shape[0]
    out = np.full(m_rows, np.nan)
    room = n_valid - 1
    windows = {int(r): _windows(int(r), min_width) for r in np.unique(room) if r >= min_width}
    has_room = np.array([len(windows.get(int(r), ())) >= levels for r in room], dtype=bool)
    for r in np.unique(room[has_room]):
        rows = np.flatnonzero(room == r)
        widths = np.array(windows[int(r)])
        q = (F[np.ix_(rows, widths)] - F[rows, :1]) / (widths * h)
        tail = q[:, -levels:]
        ok = (tail.shape[1] == levels) & np.all(np.isfinite(tail), axis=1)
        ok &= (tail.max(axis=1) - tail.min(axis=1)) <= tol
        out[rows[ok]] = tail[ok, -1]
    return out, has_room


def _branch_limits(phi, s0, t0, lo, hi, opts, back, fwd, levels, tol, min_width):
    """Right and left derivative limits of phi along the chosen branches."""
    fw, nf, bw, nb, gaps = branch_rows(phi, s0, t0, (lo, hi), opts, back, fwd)
    h = opts.h

    def f_rows(rows, n, sign):
        k = np.arange(rows.shape[1])
        valid = k[None, :] < n[:, None]
        S = s0[:, None] + sign * h * k[None, :]
        G = np.where(valid, rows, t0[:, None])
        S = np.where(valid, S, s0[:, None])
        return phi.values(S, G, check_bound=False)

    right, r_room = _one_sided(f_rows(fw, nf, 1.0), nf, h, levels, tol, min_width)
    # left quotients (F(s0) - F(s0 - m h)) / (m h) = -(F_b[m] - F_b[0]) / (m h)
    left, l_room = _one_sided(f_rows(bw, nb, -1.0), nb, h, levels, tol, min_width)
    left = -left
    return right, left, r_room, l_room, gaps


def _combine(right, left, r_room, l_room, tol):
    """Two-sided value where the one-sided limits agree (or only one side has room)."""
    both = r_room & l_room
    val = np.where(both & (np.abs(right - left) <= tol), 0.5 * (right + left), np.nan)
    val = np.where(r_room & ~l_room, right, val)
    val = np.where(l_room & ~r_room, left, val)
    return val


def broad_representative(phi: ScalarField, domain: Domain, grid_res, opts: FlowOptions = FlowOptions(),
                         radius: float = 0.1, levels: int = 4, tol: float = 1e-2, min_width: int = 8,
                         fine_eps: float | None = None):
    """Pointwise source ``w_hat`` on a cell-centred lattice.

    ``grid_res`` is an int or ``(nz, nt)``.  At each node A the merged curve
    through A is built and the one-sided limits of the derivative of
    ``phi`` along it are taken; if they agree that is the value.  Otherwise
    the minimal and maximal curves are probed: a two-sided value from either
    is accepted, then agreeing forward limits; disagreeing forward limits
    flag the node as multivalued and record the minimal branch.

    The eps-shift biases a quotient over a window w by about eps / w, so
    nodes that do not settle with ``opts`` are redone with the shift
    ``fine_eps`` (default ``tol * min_width * h / 10``).

    Returns ``(w_hat, flags)`` with ``w_hat`` a cell-valued sampled field.
    """
    nz, nt = (grid_res, grid_res) if np.ndim(grid_res) == 0 else grid_res
    nz, nt = int(nz), int(nt)
    if nz < 2 or nt < 2:
        raise ValueError("grid_res must give at least 2 nodes per axis")
    zs = _cell_centres(domain.z_lo, domain.z_hi, nz)
    ts = _cell_centres(domain.t_lo, domain.t_hi, nt)
    Z, T = np.meshgrid(zs, ts, indexing="ij")
    s0, t0 = Z.ravel(), T.ravel()
    lo = np.maximum(domain.z_lo, s0 - radius)
    hi = np.minimum(domain.z_hi, s0 + radius)
    if fine_eps is None:
        fine_eps = tol * min_width * opts.h / 10.0
    fine = replace(opts, eps0=fine_eps * 2.0 ** opts.eps_levels)
    args = (levels, tol, min_width)

    m = s0.size
    value = np.zeros(m)
    status = np.zeros(m, dtype=np.int8)
    branches = np.full((m, 2), np.nan)
    messages = {}

    def merged_pass(idx, o):
        r, l, rr, lr, gaps = _branch_limits(phi, s0[idx], t0[idx], lo[idx], hi[idx], o,
                                             Selection.MAXIMAL, Selection.MINIMAL, *args)
        v = np.where(gaps <= o.tol, _combine(r, l, rr, lr, tol), np.nan)
        done = np.isfinite(v)
        value[idx[done]] = v[done]
        return idx[~done]

    pending = merged_pass(np.arange(m), opts)
    if pending.size:
        pending = merged_pass(pending, fine)
    if pending.size:
        idx = pending
        sel = (s0[idx], t0[idx], lo[idx], hi[idx], fine)
        rmin, lmin, rr, lr, gmin = _branch_limits(phi, *sel, Selection.MINIMAL, Selection.MINIMAL, *args)
        two_min = _combine(rmin, lmin, rr, lr, tol)
        rmax, lmax, rr, lr, gmax = _branch_limits(phi, *sel, Selection.MAXIMAL, Selection.MAXIMAL, *args)
        two_max = _combine(rmax, lmax, rr, lr, tol)
        for k, j in enumerate(idx):
            if max(gmin[k], gmax[k]) > fine.tol:
                status[j] = 2
                messages[int(j)] = "extremal curves did not settle"
            elif np.isfinite(two_min[k]) or np.isfinite(two_max[k]):
                value[j] = two_min[k] if np.isfinite(two_min[k]) else two_max[k]
            elif not (np.isfinite(rmin[k]) and np.isfinite(rmax[k])):
                status[j] = 2
                messages[int(j)] = "forward limits did not converge"
            elif abs(rmin[k] - rmax[k]) <= tol:
                value[j] = 0.5 * (rmin[k] + rmax[k])
            else:
                status[j] = 1
                value[j] = rmin[k]
                branches[j] = (rmin[k], rmax[k])

    grid_dom = Domain(zs[0], zs[-1], ts[0], ts[-1])
    w_hat = ScalarField.sampled(grid_dom, value.reshape(Z.shape), cells=True)
    flags = BroadFlags(zs, ts, status.reshape(Z.shape), branches.reshape(Z.shape + (2,)), messages)
    return w_hat, flags


def check_broad(phi: ScalarField, w_hat: ScalarField, curves: list[Characteristic], tol: float = 1e-2,
                flags: BroadFlags | None = None, name: str = "broad") -> VerificationReport:
    """Compare the change of ``phi`` along each curve with the integral of ``w_hat``.

    Samples whose lattice cell is flagged are left out of the integral; their
    s-measure widens the allowance by ``measure * sup|w_hat|``.
    """
    report = VerificationReport({"check": "broad", "curves": len(curves)})
    wmax = float(np.max(np.abs(w_hat.grid_values))) if w_hat.kind == "sampled" else w_hat.bound
    for n, c in enumerate(curves):
        f0, f1 = phi.values(c.s[[0, -1]], c.gamma[[0, -1]])
        wv = w_hat.values(c.s, c.gamma)
        keep = np.ones(len(c), dtype=bool)
        if flags is not None:
            dz = flags.zs[1] - flags.zs[0]
            dt = flags.ts[1] - flags.ts[0]
            i = np.clip(np.floor((c.s - flags.zs[0]) / dz + 0.5).astype(int), 0, len(flags.zs) - 1)
            k = np.clip(np.floor((c.gamma - flags.ts[0]) / dt + 0.5).astype(int), 0, len(flags.ts) - 1)
            keep = ~flags.flagged[i, k]
        integrand = np.where(keep, wv, 0.0)
        integral = float(trapezoid(integrand, c.s))
        measure = float(np.sum(~keep)) * c.h
        gap = abs((f1 - f0) - integral)
        report.add(CheckRecord(f"{name}[{n}]", gap, tol + measure * wmax, 0.0, "<=",
                               {"delta_phi": float(f1 - f0), "integral": integral, "flagged_measure": measure}))
    return report


def linear_characteristic(n: int, i: int, z, t: float) -> float:
    """Invariant of the linear horizontal field in direction i through ``(z, t)``.

    ``t - z_{i+n} z_i / 2`` for ``i < n`` and ``t + z_{i-n} z_i / 2`` for ``i > n``
    (indices from 1).
    """
    if n < 2:
        raise ValueError("linear characteristics need n >= 2")
    if i == n:
        raise ValueError("direction n is the nonlinear field; use the flow machinery")
    if not 1 <= i <= 2 * n - 1:
        raise ValueError(f"i must lie in 1..{2 * n - 1}")
    z = np.asarray(z, dtype=float)
    if z.shape != (2 * n - 1,):
        raise ValueError(f"z must have length {2 * n - 1}")
    if i < n:
        return float(t - 0.5 * z[i + n - 1] * z[i - 1])
    return float(t + 0.5 * z[i - n - 1] * z[i - 1])


def lipschitz_sample(phi: ScalarField, domain: Domain, count: int = 5, seed: int = 0,
                     opts: FlowOptions = FlowOptions()) -> float:
    """Largest Lipschitz-along constant over a few merged curves (precondition probe)."""
    rng = np.random.default_rng(seed)
    s0 = rng.uniform(domain.z_lo, domain.z_hi, count)
    t0 = rng.uniform(domain.t_lo, domain.t_hi, count)
    curves, _ = curves_many(phi, s0, t0, (domain.z_lo, domain.z_hi), opts, Selection.MAXIMAL,
                            Selection.MINIMAL, Selection.MERGED, check=False)
    return max(lipschitz_along(phi, c) for c in curves if len(c) >= 3)
