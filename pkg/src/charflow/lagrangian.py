"""Monotone Lagrangian parameterisations chi(s, tau).

A parameterisation is a matrix of characteristic columns on a common
uniform s-grid, ordered so that every s-row is nondecreasing in tau.  Each
column is a merged curve (minimal forward, maximal backward) launched from
some grid row; minimal curves from the first row and maximal-backward curves
from the last row are the two special cases.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .characteristics import Characteristic, FlowOptions, Selection, _march, consistency_constant
from .fields import Domain, ScalarField

PARTIAL = "partial"
EDGE_INSET = 1e-2  # inserted curves start this fraction of the gap inside its edges
TAU_MARGIN = 5e-2  # and this fraction of the opened parameter interval inside its ends
FULL = "full"


class ParamError(ValueError):
    """Invalid parameterisation input or a broken invariant."""


class ThetaCollision(ParamError):
    """Two different curves received the same theta value."""

    def __init__(self, message, curves):
        super().__init__(message)
        self.curves = curves


class InversionAmbiguity(ParamError):
    """A collapsed tau-interval carries non-constant derivative values."""


@dataclass(frozen=True)
class ExtendOptions:
    """Tolerances of the gap search and filling.

    ``gap_tol``: smallest image gap (t units) examined; ``fill_step``:
    spacing of inserted curves inside an opened gap; ``collapse_tol``:
    preimage length (t units, on the launch row) below which a gap is a jump
    of the family rather than a sampling gap.
    """

    gap_tol: float = 2.5e-4
    fill_step: float = 4e-3
    collapse_tol: float = 1e-9


@dataclass
class ExtensionTrace:
    """Record of extension steps (one dict per dichotomous section)."""

    steps: list = field(default_factory=list)

    def growth_by_level(self) -> dict:
        out: dict = {}
        for st in self.steps:
            out[st["n"]] = out.get(st["n"], 0.0) + st["growth"]
        return out

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExtensionTrace":
        return cls(json.loads(text)["steps"])

    def compose(self, tau, start: int = 0):
        """Map old parameters through the injections of steps ``start``..."""
        tau = np.asarray(tau, dtype=np.float64)
        for st in self.steps[start:]:
            tau = apply_injection(st["injection"], tau)
        return tau


def apply_injection(inj: dict, tau):
    """``j(tau) = scale * (tau + sum of openings at breakpoints below tau)``."""
    tau = np.asarray(tau, dtype=np.float64)
    bp = np.asarray(inj["breakpoints"], dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(inj["openings"])])
    k = np.searchsorted(bp, tau, side="left")
    return inj.get("scale", 1.0) * (tau + cum[k])


class LagrangianParam:
    """Columns chi(s_i, tau_j) with launch metadata.

    ``launch_row[j]``/``launch_val[j]`` identify the merged curve behind
    column j.  ``probe`` maps selected rows to the column values at the last
    three eps-levels (used to extrapolate stall positions).
    """

    def __init__(self, phi, domain, s_grid, tau, chi, kind=PARTIAL, trace=None, launch_row=None,
                 launch_val=None, probe=None, opts=FlowOptions(), consistency=float("nan")):
        self.phi = phi
        self.domain = domain
        self.s_grid = np.asarray(s_grid, dtype=np.float64)
        self.tau = np.asarray(tau, dtype=np.float64)
        self.chi = np.asarray(chi, dtype=np.float64)
        self.kind = kind
        self.trace = trace
        m = self.chi.shape[1]
        self.launch_row = np.zeros(m, dtype=np.int64) if launch_row is None else np.asarray(launch_row, np.int64)
        self.launch_val = self.chi[0].copy() if launch_val is None else np.asarray(launch_val, np.float64)
        self.probe = {} if probe is None else probe
        self.opts = opts
        self.consistency = consistency

    @property
    def h(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    @property
    def shape(self):
        return self.chi.shape

    def row_of(self, s: float) -> int:
        return int(np.clip(round((s - self.s_grid[0]) / self.h), 0, len(self.s_grid) - 1))

    def section(self, s: float) -> np.ndarray:
        return self.chi[self.row_of(s)]

    def column(self, j: int, selection=Selection.GENERIC) -> Characteristic:
        return Characteristic(self.s_grid, self.chi[:, j], self.h, self.s_grid[self.launch_row[j]], selection)

    def monotonicity_violations(self) -> int:
        return int(np.sum(np.diff(self.chi, axis=1) < 0))

    def image_gaps(self, lattice_step: float | None = None) -> np.ndarray:
        """Largest uncovered t-interval per row (domain ends included)."""
        d = self.domain
        ext = np.concatenate([np.full((self.chi.shape[0], 1), d.t_lo), self.chi,
                              np.full((self.chi.shape[0], 1), d.t_hi)], axis=1)
        return np.max(np.diff(ext, axis=1), axis=1)

    def to_csv(self, path) -> None:
        """Header row: ``s`` then tau values; then one row per s."""
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["s"] + [repr(float(t)) for t in self.tau])
            for s, row in zip(self.s_grid, self.chi):
                wr.writerow([repr(float(s))] + [repr(float(v)) for v in row])

    @staticmethod
    def read_csv(path):
        """Return ``(s_grid, tau, chi)`` from a file written by :meth:`to_csv`."""
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        tau = np.array([float(v) for v in rows[0][1:]])
        body = np.array([[float(v) for v in r] for r in rows[1:] if r])
        return body[:, 0], tau, body[:, 1:]

    def __repr__(self):
        return f"LagrangianParam({self.kind}, {self.chi.shape[0]} rows x {self.chi.shape[1]} columns)"


# ---------------------------------------------------------------------------
# column integration


def s_grid_for(domain: Domain, h: float) -> np.ndarray:
    n = max(2, int(round(domain.width / h)))
    return np.linspace(domain.z_lo, domain.z_hi, n + 1)


def probe_rows(n_rows: int, depth: int) -> np.ndarray:
    """Rows at dyadic fractions up to ``depth`` plus both ends."""
    last = n_rows - 1
    rows = {0, last}
    for n in range(1, depth + 1):
        for k in range(1, 2 ** n, 2):
            rows.add(int(round(k * last / 2 ** n)))
    return np.array(sorted(rows))


def _level_eps(opts: FlowOptions) -> list[float]:
    K = opts.eps_levels
    return [opts.eps(k) for k in range(max(0, K - 2), K + 1)]


def integrate_columns(phi, s_grid, rows, vals, opts: FlowOptions, probe_at):
    """Merged curves launched from ``(s_grid[rows], vals)``.

    ``vals`` may hold one row per eps-level (last three levels, coarse first).

    Returns ``(chi, probe_levels, gap)``: the final-level matrix
    (len(s_grid), m), the values of the last three eps-levels at rows
    ``probe_at`` (shape (3, len(probe_at), m)) and the per-column distance
    between the last two levels.
    """
    rows = np.asarray(rows, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    n_s, m = len(s_grid), len(rows)
    h = float(s_grid[1] - s_grid[0])
    s0 = s_grid[rows]
    levels = []
    eps_list = _level_eps(opts)
    for li, eps in enumerate(eps_list):
        v = vals if vals.ndim == 1 else vals[li - len(eps_list)]
        nsub = opts.substeps(eps)
        fw, _, _ = _march(phi, s0, v, 1, n_s - 1 - rows, h, -eps, nsub)
        bw, _, _ = _march(phi, s0, v, -1, rows, h, -eps, nsub)
        chi = np.empty((n_s, m))
        for j in range(m):
            r = rows[j]
            chi[r:, j] = fw[j, :n_s - r]
            chi[:r + 1, j] = bw[j, :r + 1][::-1]
        levels.append(chi)
    gap = np.max(np.abs(levels[-1] - levels[-2]), axis=0) if m else np.zeros(0)
    probe = np.stack([lv[probe_at] for lv in levels]) if m else np.zeros((len(levels), len(probe_at), 0))
    while probe.shape[0] < 3:  # fewer than three levels available
        probe = np.concatenate([probe[:1], probe], axis=0)
    return levels[-1], probe, gap


def _follow_bounds(chi, rows, lower, upper, probe=None, lower_p=None, upper_p=None, probe_at=None):
    """Touch-and-follow: once a column meets a bound, it stays on it (away from its launch row)."""
    n_s, m = chi.shape
    idx = np.arange(n_s)[:, None]
    fwd = idx >= rows[None, :]
    low_hit = chi <= lower
    up_hit = chi >= upper

    def sticky(mask):
        # forward from the launch row: cumulative OR going down the rows; backward: going up
        f = np.logical_or.accumulate(np.where(fwd, mask, False), axis=0)
        b = np.logical_or.accumulate(np.where(~fwd, mask, False)[::-1], axis=0)[::-1]
        return np.where(fwd, f, b)

    on_low, on_up = sticky(low_hit), sticky(up_hit)
    on_up &= ~on_low
    out = np.where(on_low, lower, np.where(on_up, upper, chi))
    if probe is not None:
        pl, pu = on_low[probe_at], on_up[probe_at]
        probe = np.where(pl[None], lower_p, np.where(pu[None], upper_p, probe))
    return out, probe


def _aitken(v):
    """Extrapolate a 3-level sequence (coarse to fine) to eps -> 0."""
    v0, v1, v2 = v
    d1, d2 = v1 - v0, v2 - v1
    den = d2 - d1
    ok = (np.abs(den) > 1e-300) & (np.abs(d2) < np.abs(d1)) & (d1 * d2 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ext = v2 - np.where(ok, d2 * d2 / np.where(ok, den, 1.0), 0.0)
    return ext


# ---------------------------------------------------------------------------
# monotone assembly


def _enforce_monotone(chi, tol, what):
    viol = np.max(np.maximum(0.0, -np.diff(chi, axis=1)), initial=0.0)
    if viol > tol:
        raise ParamError(f"{what}: columns cross by {viol:.3g} > tol {tol:.3g}")
    if viol > 0:
        chi = np.maximum.accumulate(chi, axis=1)
    return chi, float(viol)


def build_minimal_param(phi: ScalarField, domain: Domain, tau_samples: int, opts: FlowOptions = FlowOptions(),
                        include_terminal: bool = False, probe_depth: int = 6,
                        ext: ExtendOptions = ExtendOptions()) -> LagrangianParam:
    """Minimal curves launched from ``tau_samples`` equispaced points of the first section.

    tau is the launch height rescaled to [0, 1].  With ``include_terminal``
    the gaps left at the last section are filled with maximal-backward
    curves (an extension step with unit scale) and tau is rescaled back to
    [0, 1].
    """
    if tau_samples < 2:
        raise ParamError("tau_samples must be >= 2")
    s_grid = s_grid_for(domain, opts.h)
    probe_at = probe_rows(len(s_grid), probe_depth)
    launch = np.linspace(domain.t_lo, domain.t_hi, tau_samples)
    rows = np.zeros(tau_samples, dtype=np.int64)
    chi, probe, gap = integrate_columns(phi, s_grid, rows, launch, opts, probe_at)
    if np.max(gap, initial=0.0) > opts.tol:
        raise ParamError(f"minimal curves did not settle (gap {np.max(gap):.3g})")
    chi, _ = _enforce_monotone(chi, opts.tol, "minimal family")
    tau = (launch - domain.t_lo) / domain.height
    p = LagrangianParam(phi, domain, s_grid, tau, chi, PARTIAL, ExtensionTrace(), rows, launch,
                        dict(zip(probe_at.tolist(), np.moveaxis(probe, 1, 0))), opts)
    p.consistency = _consistency(p)
    if include_terminal:
        p = _extension_step(p, len(s_grid) - 1, 1.0, n=0, h_index=0, ext=ext)
        total = p.tau[-1] if p.tau[-1] > 0 else 1.0
        p.tau = p.tau / total
        p.trace.steps[-1]["injection"]["scale"] = 1.0 / total
    return p


def _consistency(p: LagrangianParam) -> float:
    h = p.h
    S = np.broadcast_to(p.s_grid[:-1, None], p.chi[:-1].shape)
    f = p.phi.values(S, p.chi[:-1], check_bound=False)
    err = np.abs(np.diff(p.chi, axis=0) - h * f)
    # steps touching the domain edge are clamped, not integrated
    edge = (p.chi <= p.domain.t_lo) | (p.chi >= p.domain.t_hi)
    err[edge[:-1] | edge[1:]] = 0.0
    return float(np.max(err, initial=0.0)) / (h * h)


# ---------------------------------------------------------------------------
# theta and full parameterisations


def dyadic_enumeration(K: int) -> np.ndarray:
    """r_0 = 0, r_1 = 1, then odd multiples of 2^-l for l = 1, 2, ...; K + 1 points."""
    out = [0.0, 1.0]
    level = 1
    while len(out) < K + 1:
        out.extend((2 * j + 1) / 2.0 ** level for j in range(2 ** (level - 1)))
        level += 1
    return np.array(out[:K + 1])


def theta_encode(curve: Characteristic, K: int = 60) -> float:
    """``sum_k 2^-k gamma(r_k)`` over the fixed enumeration of [0, 1].

    The curve must cover [0, 1]; values between samples are linear.
    Truncation leaves out at most ``2^(1-K) sup|gamma|``.
    """
    if K < 1:
        raise ParamError("K must be >= 1")
    s_lo, s_hi = curve.s_range
    if s_lo > 1e-9 or s_hi < 1 - 1e-9:
        raise ParamError("curve must cover the normalised range [0, 1]")
    r = dyadic_enumeration(K)
    return float(math.fsum(np.ldexp(np.interp(r, curve.s, curve.gamma), -np.arange(K + 1))))


def _theta_matrix(s_norm, G, K):
    r = dyadic_enumeration(K)
    w = np.ldexp(1.0, -np.arange(K + 1))
    idx = np.clip(np.searchsorted(s_norm, r, side="right") - 1, 0, len(s_norm) - 2)
    a = (r - s_norm[idx]) / (s_norm[idx + 1] - s_norm[idx])
    vals = G[idx] * (1 - a)[:, None] + G[idx + 1] * a[:, None]
    # sum from the smallest weights up for accuracy
    return np.sum((vals * w[:, None])[::-1], axis=0)


def build_full_param(phi: ScalarField, domain: Domain, resolution: int, opts: FlowOptions = FlowOptions(),
                     K: int = 60, dedupe_tol: float = 1e-6) -> LagrangianParam:
    """Merged curves through a ``resolution x resolution`` anchor lattice, ordered by theta.

    tau is theta of the curve rescaled to the unit square, so tau lies in
    [0, 2].  The result is Full when every section's largest image gap is at
    most twice the anchor lattice step in t.
    """
    if resolution < 2:
        raise ParamError("resolution must be >= 2")
    s_grid = s_grid_for(domain, opts.h)
    n_s = len(s_grid)
    rows_1d = np.unique(np.round(np.linspace(0, n_s - 1, resolution)).astype(np.int64))
    ts = np.linspace(domain.t_lo, domain.t_hi, resolution)
    R, T = np.meshgrid(rows_1d, ts, indexing="ij")
    rows, vals = R.ravel(), T.ravel()
    chi, probe, gap = integrate_columns(phi, s_grid, rows, vals, opts, np.array([0]))
    if np.max(gap) > opts.tol:
        j = int(np.argmax(gap))
        raise ParamError(f"merged curve through ({s_grid[rows[j]]:.4g}, {vals[j]:.4g}) did not settle")
    s_norm = (s_grid - domain.z_lo) / domain.width
    G = (chi - domain.t_lo) / domain.height
    theta = _theta_matrix(s_norm, G, K)
    order = np.lexsort((vals, rows, theta))
    theta, chi, rows, vals = theta[order], chi[:, order], rows[order], vals[order]
    # drop curves equal to their predecessor
    same = np.max(np.abs(np.diff(chi, axis=1)), axis=0) <= dedupe_tol * domain.height
    keep = np.concatenate([[True], ~same])
    theta, chi, rows, vals = theta[keep], chi[:, keep], rows[keep], vals[keep]
    clash = np.flatnonzero(np.diff(theta) <= 0)
    if clash.size:
        j = int(clash[0])
        curves = tuple(Characteristic(s_grid, chi[:, k], opts.h, s_grid[rows[k]]) for k in (j, j + 1))
        raise ThetaCollision(f"theta collision {theta[j]!r} between distinct curves", curves)
    chi, viol = _enforce_monotone(chi, opts.tol, "merged family")
    p = LagrangianParam(phi, domain, s_grid, theta, chi, PARTIAL, None, rows, vals, {}, opts)
    p.consistency = _consistency(p)
    step = domain.height / (resolution - 1)
    p.max_gap = float(np.max(p.image_gaps()))
    p.lattice_step = step
    p.monotone_repair = viol
    if p.max_gap <= 2 * step:
        p.kind = FULL
    return p


def theta_lookup(p: LagrangianParam, theta: float) -> int:
    """Index of the stored column whose parameter is nearest to ``theta``."""
    j = int(np.searchsorted(p.tau, theta))
    cand = [k for k in (j - 1, j) if 0 <= k < len(p.tau)]
    return min(cand, key=lambda k: abs(p.tau[k] - theta))


# ---------------------------------------------------------------------------
# extension


def dyadic_sections(depth: int):
    """(n, h, s) with s = 2^-n + h 2^{1-n}, in lexicographic order."""
    for n in range(1, depth + 1):
        for h in range(2 ** (n - 1)):
            yield n, h, 2.0 ** (-n) + h * 2.0 ** (1 - n)


def _candidate_gaps(x, lo, hi, tol):
    """Index pairs (j, j+1) with image gap > tol; -1 / m denote the domain ends."""
    ext = np.concatenate([[lo], x, [hi]])
    d = np.diff(ext)
    k = np.flatnonzero(d > tol)
    return [(int(i) - 1, int(i)) for i in k]


def _probe_values(p, row, cols):
    if row in p.probe:
        return p.probe[row][:, cols]
    v = p.chi[row, cols]
    return np.stack([v, v, v])


def _preimage(p, row, x, fam_rows):
    """Launch-row value of the curve of the family's dynamics through (s_row, x)."""
    opts = p.opts
    eps = opts.eps(opts.eps_levels)
    nsub = opts.substeps(eps)
    out = np.empty(len(x))
    for fr in np.unique(fam_rows):
        sel = np.flatnonzero(fam_rows == fr)
        steps = abs(int(fr) - row)
        if steps == 0:
            out[sel] = x[sel]
            continue
        direction = 1 if fr > row else -1
        rows_out, _, _ = _march(p.phi, np.full(len(sel), p.s_grid[row]), x[sel], direction,
                                np.full(len(sel), steps), p.h, -eps, nsub)
        out[sel] = rows_out[:, steps]
    return out


def _extension_step(p: LagrangianParam, row: int, scale: float, n: int, h_index: int,
                    ext: ExtendOptions) -> LagrangianParam:
    """Open and fill the real gaps of the image at grid row ``row``."""
    dom = p.domain
    probe_at = np.array(sorted(p.probe)) if p.probe else np.array([row])
    x = p.chi[row]
    m = x.size
    cands = _candidate_gaps(x, dom.t_lo, dom.t_hi, ext.gap_tol)
    gaps = []
    if cands:
        lo_j = np.array([j for j, _ in cands])
        up_j = np.array([k for _, k in cands])
        a = np.where(lo_j >= 0, x[np.clip(lo_j, 0, m - 1)], dom.t_lo)
        b = np.where(up_j < m, x[np.clip(up_j, 0, m - 1)], dom.t_hi)
        inset = 0.1 * (b - a)
        real = np.ones(len(cands), dtype=bool)
        for side in (lo_j, up_j):
            has = (side >= 0) & (side < m)
            if not has.any():
                continue
            fam = p.launch_row[np.clip(side, 0, m - 1)][has]
            # a jump of the family: the whole gap pulls back to a single launch point
            pa = _preimage(p, row, (a + inset)[has], fam)
            pb = _preimage(p, row, (b - inset)[has], fam)
            real[np.flatnonzero(has)[np.abs(pb - pa) > ext.collapse_tol]] = False
        for i in np.flatnonzero(real):
            j, k = cands[i]
            lev_a = _probe_values(p, row, [j])[:, 0] if j >= 0 else np.full(3, dom.t_lo)
            lev_b = _probe_values(p, row, [k])[:, 0] if k < m else np.full(3, dom.t_hi)
            # stall positions drift with eps; extrapolate both edges to eps -> 0
            ea = float(_aitken(lev_a)) if j >= 0 else dom.t_lo
            eb = float(_aitken(lev_b)) if k < m else dom.t_hi
            gaps.append((j, k, lev_a, lev_b, ea, eb))

    openings = np.array([scale * (g[5] - g[4]) / dom.height for g in gaps])
    inserted, breakpoints, fracs = [], [], []
    for j, k, lev_a, lev_b, _, _ in gaps:
        count = max(2, int(math.ceil((lev_b[-1] - lev_a[-1]) / ext.fill_step)) + 1)
        u = EDGE_INSET + np.linspace(0.0, 1.0, count) * (1 - 2 * EDGE_INSET)
        fracs.append(u)
        inserted.extend([[float(p.s_grid[row]), float(lev_a[-1] + v * (lev_b[-1] - lev_a[-1]))] for v in u])
        breakpoints.append(float(p.tau[j]) if j >= 0 else float(np.nextafter(p.tau[0], -np.inf)))
    if gaps:
        p = _insert_columns(p, row, gaps, fracs, openings, probe_at)
    step = {
        "n": n, "h": h_index, "s": float(p.s_grid[row]), "row": int(row), "scale": scale,
        "gaps": [[float(g[4]), float(g[5])] for g in gaps],
        "gaps_raw": [[float(g[2][-1]), float(g[3][-1])] for g in gaps],
        "growth": float(np.sum(openings)),
        "injection": {"breakpoints": breakpoints, "openings": [float(o) for o in openings], "scale": 1.0},
        "inserted": inserted,
    }
    if p.trace is None:
        p.trace = ExtensionTrace()
    p.trace.steps.append(step)
    return p


def _insert_columns(p, row, gaps, fracs, openings, probe_at):
    """Fill each gap with merged curves through the section and open the parameter line.

    A curve at fraction u of a gap is launched at ``a_k + u (b_k - a_k)``
    for every eps-level k, with a_k, b_k the bounding columns at that level,
    so the levels agree on where the curve sits relative to the stalls.
    """
    dom = p.domain
    n_s, m = p.chi.shape
    counts = [len(u) for u in fracs]
    launch = np.concatenate([g[2][:, None] + u[None, :] * (g[3] - g[2])[:, None]
                             for g, u in zip(gaps, fracs)], axis=1)
    rows = np.full(launch.shape[1], row, dtype=np.int64)
    chi_new, probe_new, gap = integrate_columns(p.phi, p.s_grid, rows, launch, p.opts, probe_at)
    if np.max(gap, initial=0.0) > p.opts.tol:
        raise ParamError(f"inserted curves did not settle (gap {np.max(gap):.3g})")
    probe_old = np.stack([p.probe[r] for r in probe_at.tolist()], axis=1) if p.probe else None

    new_tau, new_cols, new_probe = [], [], []
    shift = np.zeros(m)
    below = 0.0  # openings already made below the current gap
    c0 = 0
    for (j, k, *_), u, op, cnt in zip(gaps, fracs, openings, counts):
        cols = slice(c0, c0 + cnt)
        c0 += cnt
        lower = p.chi[:, j] if j >= 0 else np.full(n_s, dom.t_lo)
        upper = p.chi[:, k] if k < m else np.full(n_s, dom.t_hi)
        full = (3, len(probe_at))
        lp = probe_old[:, :, j] if (j >= 0 and probe_old is not None) else np.full(full, dom.t_lo)
        up = probe_old[:, :, k] if (k < m and probe_old is not None) else np.full(full, dom.t_hi)
        ch, pr = _follow_bounds(chi_new[:, cols], rows[cols], lower[:, None], upper[:, None],
                                probe_new[:, :, cols], lp[:, :, None], up[:, :, None], probe_at)
        # rounding can leave neighbours out of order by a few ulps
        ch = np.maximum.accumulate(ch, axis=1)
        base = p.tau[j] if j >= 0 else p.tau[0]
        # linear in u; the end curves sit TAU_MARGIN inside the opened interval
        w = (u - u[0]) / (u[-1] - u[0])
        new_tau.append(base + below + op * (TAU_MARGIN + (1 - 2 * TAU_MARGIN) * w))
        new_cols.append(ch)
        new_probe.append(pr)
        shift += op if j < 0 else np.where(np.arange(m) > j, op, 0.0)
        below += op

    tau = np.concatenate([p.tau + shift] + new_tau)
    chi = np.concatenate([p.chi] + new_cols, axis=1)
    lrow = np.concatenate([p.launch_row, rows])
    lval = np.concatenate([p.launch_val, launch[-1]])
    order = np.argsort(tau, kind="stable")
    tau, chi, lrow, lval = tau[order], chi[:, order], lrow[order], lval[order]
    if np.any(np.diff(tau) <= 0):
        raise ParamError("injection produced non-increasing parameters")
    viol = np.max(np.maximum(0.0, -np.diff(chi, axis=1)), initial=0.0)
    if viol > 0:
        raise ParamError(f"monotonicity broken after insertion ({viol:.3g})")
    probe = None
    if p.probe:
        stacked = np.concatenate([probe_old] + new_probe, axis=2)[:, :, order]
        probe = {r: stacked[:, i, :] for i, r in enumerate(probe_at.tolist())}
    return LagrangianParam(p.phi, p.domain, p.s_grid, tau, chi, p.kind, p.trace, lrow, lval, probe, p.opts,
                           p.consistency)


def extend_param(p: LagrangianParam, depth: int, opts: FlowOptions | None = None,
                 ext: ExtendOptions = ExtendOptions(), start: int = 1) -> LagrangianParam:
    """Extend a partial parameterisation over dichotomous sections up to ``depth``.

    At section ``s = 2^-n + h 2^{1-n}`` (n = 1..depth, h ascending) the real
    gaps I_k of the image are located, the parameter line is opened by
    ``|I_k| / 2^{2n-1}`` (lengths relative to the domain height) and merged
    curves through the section fill each gap, following the bounding curves
    once they touch them.  Old columns are never modified.  ``start > 1``
    resumes a parameterisation already extended to depth ``start - 1``.
    """
    if depth < 1:
        raise ParamError("depth must be >= 1")
    if p.kind == FULL:
        return p
    if opts is not None:
        p = LagrangianParam(p.phi, p.domain, p.s_grid, p.tau, p.chi, p.kind, p.trace, p.launch_row,
                            p.launch_val, p.probe, opts, p.consistency)
    q = LagrangianParam(p.phi, p.domain, p.s_grid, p.tau.copy(), p.chi, p.kind,
                        ExtensionTrace(list(p.trace.steps) if p.trace else []), p.launch_row, p.launch_val,
                        p.probe, p.opts, p.consistency)
    last = len(q.s_grid) - 1
    for n, h, s in dyadic_sections(depth):
        if n < start:
            continue
        row = int(round(s * last))
        q = _extension_step(q, row, 2.0 ** (1 - 2 * n), n, h, ext)
    q.consistency = _consistency(q)
    return q


def param_lip_profile(p: LagrangianParam, s: float, chi_tol: float | None = None) -> float:
    """Max over adjacent parameters of ``|d chi| / |d tau|`` at the section nearest ``s``.

    Differences up to ``chi_tol`` (default ``1e-4`` times the domain height)
    are treated as flat; they come from eps-offsets of curves that meet in
    the limit.
    """
    if p.chi.shape[1] < 2:
        raise ParamError("need at least two parameters")
    tol = 1e-4 * p.domain.height if chi_tol is None else chi_tol
    row = p.section(s)
    d = np.maximum(np.abs(np.diff(row)) - tol, 0.0)
    return float(np.max(d / np.diff(p.tau)))


def covered_length_ledger(trace: ExtensionTrace, bands) -> np.ndarray:
    """Total opened gap length inside each band ``(lo, hi)`` over steps with n >= 1."""
    out = np.zeros(len(bands))
    for st in trace.steps:
        if st["n"] < 1:
            continue
        for a, b in st["gaps"]:
            for i, (lo, hi) in enumerate(bands):
                out[i] += max(0.0, min(b, hi) - max(a, lo))
    return out


# ---------------------------------------------------------------------------
# mollification and the Lagrangian source


def _bump_kernel(eps: float, dtau: float) -> np.ndarray:
    r = int(math.floor(eps / dtau))
    if r < 1:
        raise ParamError("eps is below the tau resolution")
    x = np.arange(-r, r + 1) * dtau / eps
    inside = np.abs(x) < 1
    k = np.zeros_like(x)
    k[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return k / k.sum()


def mollify_param(p: LagrangianParam, eps: float, tau_points: int = 2001, t_points: int = 8001,
                  collapse_tol: float | None = None, ambiguity_tol: float = 5e-2):
    """Convolve chi with a bump of radius ``eps`` in tau.

    chi is resampled on a uniform tau grid (edge values extended) and
    convolved row by row.  ``phi_eps`` is read off through
    ``phi_eps(s, chi_eps) = (phi o Upsilon) * rho``, which is the s-derivative
    of chi_eps, by inverting the monotone rows of chi_eps; it is sampled on a
    ``len(s_grid) x t_points`` lattice.  Returns ``(chi_eps, phi_eps, l1_gap)``
    with ``l1_gap`` the lattice L1 distance between phi_eps and phi.
    """
    if p.kind != FULL:
        raise ParamError("mollification needs a full parameterisation")
    span = p.tau[-1] - p.tau[0]
    if not 0 < eps < span / 4:
        raise ParamError("eps must be positive and below a quarter of the tau interval")
    dom = p.domain
    tau_u = np.linspace(p.tau[0], p.tau[-1], tau_points)
    kern = _bump_kernel(eps, tau_u[1] - tau_u[0])
    r = len(kern) // 2
    f = _velocity(p)

    def smooth(M):
        M = np.stack([np.interp(tau_u, p.tau, row) for row in M])
        padded = np.pad(M, ((0, 0), (r, r)), mode="edge")
        return np.stack([np.convolve(row, kern, mode="valid") for row in padded])

    chi_e = np.maximum.accumulate(smooth(p.chi), axis=1)
    psi = smooth(f)
    collapse_tol = 1e-9 * dom.height if collapse_tol is None else collapse_tol
    ts = np.linspace(dom.t_lo, dom.t_hi, t_points)
    vals = np.stack([_invert_row(c, q, ts, collapse_tol, ambiguity_tol) for c, q in zip(chi_e, psi)])
    phi_eps = ScalarField.sampled(Domain(dom.z_lo, dom.z_hi, dom.t_lo, dom.t_hi), vals)
    true = p.phi.on_lattice(p.s_grid, ts, check_bound=False)
    cell = (p.s_grid[1] - p.s_grid[0]) * (ts[1] - ts[0])
    l1 = float(np.sum(np.abs(vals - true)) * cell)
    q = LagrangianParam(p.phi, dom, p.s_grid, tau_u, chi_e, FULL, None, None, None, None, p.opts)
    q.psi = psi
    # samples whose kernel window reaches a column resting on the domain edge
    q.edge_touched = smooth(_clamped(p).astype(np.float64)) > 0
    return q, phi_eps, l1


def mollified_relation_error(q: LagrangianParam, phi_eps: ScalarField) -> float:
    """Max of ``|d_s chi_eps - phi_eps(s, chi_eps)|`` (centred differences) at interior points.

    Interior: not on the first or last row, and no edge-resting column in
    the kernel window on the three rows involved.
    """
    h = q.h
    d = (q.chi[2:] - q.chi[:-2]) / (2 * h)
    S = np.broadcast_to(q.s_grid[1:-1, None], d.shape)
    err = np.abs(d - phi_eps.values(S, q.chi[1:-1], check_bound=False))
    t = q.edge_touched
    interior = ~(t[2:] | t[1:-1] | t[:-2])
    return float(np.max(err[interior], initial=0.0))


def _velocity(p: LagrangianParam) -> np.ndarray:
    """phi along the columns; zero where a column rests clamped on the domain edge."""
    S = np.broadcast_to(p.s_grid[:, None], p.chi.shape)
    f = p.phi.values(S, p.chi, check_bound=False)
    return np.where(_clamped(p), 0.0, f)


def _clamped(p: LagrangianParam) -> np.ndarray:
    return (p.chi <= p.domain.t_lo) | (p.chi >= p.domain.t_hi)


def _invert_row(chi_row, psi_row, ts, collapse_tol, ambiguity_tol):
    """phi_eps at heights ``ts`` from a nondecreasing row of chi_eps.

    Runs of parameters over which chi_eps moves by less than
    ``collapse_tol`` are one point of the image; psi must be constant on
    them (up to ``ambiguity_tol``) and its mean is used.
    """
    new_run = np.concatenate([[True], np.diff(chi_row) > collapse_tol])
    starts = np.flatnonzero(new_run)
    x = chi_row[starts]
    mean = np.add.reduceat(psi_row, starts) / np.diff(np.append(starts, len(psi_row)))
    spread = np.maximum.reduceat(psi_row, starts) - np.minimum.reduceat(psi_row, starts)
    bad = np.flatnonzero(spread > ambiguity_tol)
    if bad.size:
        k = int(bad[0])
        raise InversionAmbiguity(f"collapsed parameters at t={x[k]:.4g} carry derivative values "
                                 f"spread by {spread[k]:.3g}")
    return np.interp(ts, x, mean)


def lagrangian_source(p: LagrangianParam, t_points: int = 201, mv_tol: float = 5e-2,
                      lip_max: float = 1e3, return_reached: bool = False):
    """Second s-derivative of the columns pushed to the (s, t) lattice.

    Each interior sample (s_i, chi_ij) off the domain edge gives ``d_ss chi`` by centred second
    differences; the lattice node nearest in t receives the value of the
    closest sample (ties to the lowest tau).  Nodes hit by values that differ
    by more than ``mv_tol`` are flagged; nodes never hit get 0.  Returns
    ``(w_chi, multivalued_mask)``, plus the reached mask if asked.
    """
    if p.kind != FULL:
        raise ParamError("the source needs a full parameterisation")
    h = p.h
    f = _velocity(p)
    lip = np.max(np.abs(np.diff(f, axis=0)), axis=0) / h
    if not np.all(np.isfinite(lip)) or lip.max() > lip_max:
        raise ParamError(f"phi is not Lipschitz along every column (max slope {lip.max():.3g})")
    dom = p.domain
    ts = np.linspace(dom.t_lo, dom.t_hi, t_points)
    dt = ts[1] - ts[0]
    n_s, m = p.chi.shape
    vals = np.zeros((n_s, t_points))
    reached = np.zeros((n_s, t_points), dtype=bool)
    multi = np.zeros((n_s, t_points), dtype=bool)
    d2 = (p.chi[2:] - 2 * p.chi[1:-1] + p.chi[:-2]) / (h * h)
    clamped = _clamped(p)
    for i in range(1, n_s - 1):
        live = ~(clamped[i - 1] | clamped[i] | clamped[i + 1])
        x = p.chi[i, live]
        v = d2[i - 1, live]
        m = x.size
        if m == 0:
            continue
        node = np.clip(np.rint((x - dom.t_lo) / dt).astype(np.int64), 0, t_points - 1)
        dist = np.abs(x - ts[node])
        order = np.lexsort((np.arange(m), dist, node))
        node, dist, v = node[order], dist[order], v[order]
        first = np.concatenate([[True], node[1:] != node[:-1]])
        nodes_hit = node[first]
        vals[i, nodes_hit] = v[first]
        reached[i, nodes_hit] = True
        vmax = np.maximum.reduceat(v, np.flatnonzero(first))
        vmin = np.minimum.reduceat(v, np.flatnonzero(first))
        multi[i, nodes_hit] = (vmax - vmin) > mv_tol
    w_chi = ScalarField.sampled(Domain(dom.z_lo, dom.z_hi, dom.t_lo, dom.t_hi), vals, cells=True)
    return (w_chi, multi, reached) if return_reached else (w_chi, multi)
