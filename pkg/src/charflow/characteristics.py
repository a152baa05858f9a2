"""Characteristic curves of ``gamma'(s) = phi(s, gamma(s))``.

The field need not be Lipschitz, so solutions through a point can branch.
Minimal and maximal solutions are approximated by integrating the shifted
fields ``phi -+ eps`` (strict sub/super-solutions) for a decreasing ladder of
shifts and checking that the last two levels agree.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import simpson

from . import _kernels as K
from .fields import ScalarField, as_point


class Selection(str, enum.Enum):
    MINIMAL = "minimal"
    MAXIMAL = "maximal"
    MERGED = "merged_min_fwd_max_bwd"
    GENERIC = "generic"


MULTIVALUED = "multivalued"


class CharacteristicError(ValueError):
    """Bad arguments for curve construction."""


class ConvergenceError(RuntimeError):
    """The eps-ladder did not settle; carries the last two curves and their gap."""

    def __init__(self, message, curves=None, gap=float("nan")):
        super().__init__(message)
        self.curves = curves
        self.gap = gap


@dataclass(frozen=True)
class FlowOptions:
    """Discretisation of the flow.

    ``h`` is the output step; the eps-ladder is ``eps0 * 2**-k`` for
    ``k = 0..eps_levels``.  RK4 substeps are refined so that the internal
    step never exceeds ``substep_ratio * eps``: a coarser step lets the
    shifted field jump across a stall point and pick the wrong branch.
    """

    h: float = 1e-3
    eps_levels: int = 2
    eps0: float = 1e-3
    tol: float = 5e-3
    substep_ratio: float = 4.0

    def __post_init__(self):
        if not (self.h > 0 and self.eps0 > 0 and self.tol > 0 and self.substep_ratio > 0):
            raise CharacteristicError("h, eps0, tol and substep_ratio must be positive")
        if self.eps_levels < 1:
            raise CharacteristicError("eps_levels must be >= 1")

    def eps(self, k: int) -> float:
        return self.eps0 * 2.0 ** (-k)

    def substeps(self, eps: float) -> int:
        return max(1, math.ceil(self.h / (self.substep_ratio * eps) - 1e-9))


class Characteristic:
    """A sampled curve ``s_i -> gamma_i`` on a uniform grid of step ``h``.

    ``clipped`` tells whether the lower/upper end was truncated at the domain
    boundary; ``consistency`` is the constant C in
    ``|gamma_{i+1} - gamma_i - h phi(s_i, gamma_i)| <= C h^2``.
    """

    __slots__ = ("s", "gamma", "h", "s0", "selection", "clipped", "consistency")

    def __init__(self, s, gamma, h, s0, selection=Selection.GENERIC, clipped=(False, False), consistency=float("nan")):
        self.s = np.asarray(s, dtype=np.float64)
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.s.setflags(write=False)
        self.gamma.setflags(write=False)
        self.h = float(h)
        self.s0 = float(s0)
        self.selection = Selection(selection)
        self.clipped = tuple(bool(c) for c in clipped)
        self.consistency = float(consistency)

    def __len__(self):
        return self.s.shape[0]

    def __repr__(self):
        return (f"Characteristic({self.selection.value}, s=[{self.s[0]:.4g}, {self.s[-1]:.4g}], "
                f"n={len(self)}, clipped={self.clipped})")

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.s.tolist(), self.gamma.tolist()))

    @property
    def s_range(self) -> tuple[float, float]:
        return float(self.s[0]), float(self.s[-1])

    def __call__(self, s):
        """Piecewise-linear interpolation of the samples."""
        return np.interp(s, self.s, self.gamma)

    def index_of(self, s: float) -> int:
        return int(round((s - self.s[0]) / self.h))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["s", "gamma"])
            for s, g in zip(self.s, self.gamma):
                wr.writerow([repr(float(s)), repr(float(g))])

    @classmethod
    def from_csv(cls, path, selection=Selection.GENERIC) -> "Characteristic":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["s", "gamma"]:
            raise CharacteristicError(f"{path}: expected header s,gamma")
        arr = np.array([[float(c) for c in r] for r in rows[1:] if r])
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise CharacteristicError(f"{path}: need at least two samples")
        ds = np.diff(arr[:, 0])
        if np.any(ds <= 0) or not np.allclose(ds, ds[0], rtol=1e-6, atol=1e-12):
            raise CharacteristicError(f"{path}: abscissas must be uniform and increasing")
        return cls(arr[:, 0], arr[:, 1], float(ds.mean()), arr[0, 0], selection)


def consistency_constant(phi: ScalarField, s, gamma, h) -> float:
    """max |gamma_{i+1} - gamma_i - h phi(s_i, gamma_i)| / h^2."""
    if len(s) < 2:
        return 0.0
    f = phi.values(s[:-1], gamma[:-1], check_bound=False)
    return float(np.max(np.abs(np.diff(gamma) - h * f)) / (h * h))


# ---------------------------------------------------------------------------
# batch integration


def _limits(phi: ScalarField):
    dom = phi.domain
    if dom is None:
        raise CharacteristicError("the field needs a domain for characteristic integration")
    return dom


def _march(phi, s0, y0, direction, nsteps, h, shift, nsub):
    """Rows of samples for many curves in one direction; returns (out, valid_len, clipped)."""
    dom = _limits(phi)
    m = len(s0)
    nsteps = np.asarray(nsteps, dtype=np.int64)
    out = np.full((m, int(nsteps.max(initial=0)) + 1), np.nan)
    exits = np.empty(m, dtype=np.int64)
    kind, code, consts, data = phi.program
    K.march(kind, code, consts, data, np.asarray(s0, np.float64), np.asarray(y0, np.float64),
            np.full(m, direction * h), nsteps, int(nsub), float(shift), dom.t_lo, dom.t_hi, out, exits)
    n_valid = nsteps + 1
    clipped = exits >= 0
    n_valid = np.where(clipped, exits + 1, n_valid)
    failed = exits == -2
    if failed.any():
        # the last finite sample closes the curve
        finite = np.isfinite(out)
        n_valid = np.where(failed, finite.argmin(axis=1), n_valid)
        clipped |= failed
    return out, n_valid, clipped


_SHIFT_SIGN = {  # (selection, direction) -> sign of the eps shift
    (Selection.MINIMAL, 1): -1.0, (Selection.MAXIMAL, 1): 1.0,
    (Selection.MINIMAL, -1): 1.0, (Selection.MAXIMAL, -1): -1.0,
}


def _extremal_half(phi, s0, y0, direction, side, nsteps, opts, all_levels=False):
    """Final-level rows of one-sided extremal curves plus the last level gap."""
    if side == Selection.GENERIC:
        out, n, c = _march(phi, s0, y0, direction, nsteps, opts.h, 0.0, 1)
        return out, n, c, np.zeros(len(s0)), None
    sign = _SHIFT_SIGN[(side, direction)]
    first = 0 if all_levels else opts.eps_levels - 1
    prev = None
    for k in range(first, opts.eps_levels + 1):
        eps = opts.eps(k)
        cur = _march(phi, s0, y0, direction, nsteps, opts.h, sign * eps, opts.substeps(eps))
        if prev is not None:
            gap = _row_gap(prev, cur)
        prev_rows, prev = (prev, cur)
    out, n, c = cur
    return out, n, c, gap, prev_rows


def _row_gap(a, b):
    out_a, n_a, _ = a
    out_b, n_b, _ = b
    n = np.minimum(n_a, n_b)
    cols = np.arange(out_a.shape[1])
    mask = cols[None, :] < n[:, None]
    d = np.where(mask, np.abs(out_a - out_b), 0.0)
    return d.max(axis=1)


def _nsteps(lo, hi, s0, h):
    fwd = np.floor((np.asarray(hi) - s0) / h + 1e-6).astype(np.int64)
    bwd = np.floor((s0 - np.asarray(lo)) / h + 1e-6).astype(np.int64)
    return np.maximum(bwd, 0), np.maximum(fwd, 0)


def _validate(phi, s0, t0, lo, hi):
    dom = _limits(phi)
    if not np.all(np.asarray(hi) > np.asarray(lo)):
        raise CharacteristicError("zero-length range")
    if np.any(s0 < lo - 1e-12) or np.any(s0 > hi + 1e-12):
        raise CharacteristicError("anchor outside the integration range")
    if np.any(lo < dom.z_lo - 1e-12) or np.any(hi > dom.z_hi + 1e-12):
        raise CharacteristicError("integration range outside the domain")
    if np.any(t0 < dom.t_lo - 1e-12) or np.any(t0 > dom.t_hi + 1e-12):
        raise CharacteristicError("anchor outside the domain")


def branch_rows(phi: ScalarField, s0, t0, s_range, opts: FlowOptions, backward: Selection, forward: Selection):
    """Raw sample rows on both sides of many anchors.

    Returns ``(fwd, n_fwd, bwd, n_bwd, gaps)``: row j of ``fwd`` holds
    gamma(s0 + i h) for i < n_fwd[j] and ``bwd`` likewise for s0 - i h;
    ``gaps`` are the last eps-level distances.
    """
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    lo, hi = (np.broadcast_to(np.asarray(r, np.float64), s0.shape) for r in s_range)
    _validate(phi, s0, t0, lo, hi)
    nb, nf = _nsteps(lo, hi, s0, opts.h)
    fw, nfv, _, fgap, _ = _extremal_half(phi, s0, t0, 1, forward, nf, opts)
    bw, nbv, _, bgap, _ = _extremal_half(phi, s0, t0, -1, backward, nb, opts)
    return fw, nfv, bw, nbv, np.maximum(fgap, bgap)


def curves_many(phi: ScalarField, s0, t0, s_range, opts: FlowOptions,
                backward: Selection, forward: Selection, selection: Selection,
                check: bool = True, all_levels: bool = False):
    """Build curves through many anchors at once.

    ``backward``/``forward`` pick the branch on each side of the anchor.
    Returns ``(curves, gaps)`` where ``gaps`` are the per-curve sup distances
    between the last two eps-levels.  With ``check`` a gap above ``opts.tol``
    raises :class:`ConvergenceError`.
    """
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    lo, hi = (np.broadcast_to(np.asarray(r, np.float64), s0.shape) for r in s_range)
    _validate(phi, s0, t0, lo, hi)
    nb, nf = _nsteps(lo, hi, s0, opts.h)
    h = opts.h
    fw, nfv, fc, fgap, fprev = _extremal_half(phi, s0, t0, 1, forward, nf, opts, all_levels)
    bw, nbv, bc, bgap, bprev = _extremal_half(phi, s0, t0, -1, backward, nb, opts, all_levels)
    gaps = np.maximum(fgap, bgap)
    curves = []
    for j in range(len(s0)):
        g = np.concatenate([bw[j, :nbv[j]][::-1], fw[j, 1:nfv[j]]])
        s = s0[j] + h * np.arange(-(nbv[j] - 1), nfv[j])
        c = Characteristic(s, g, h, s0[j], selection, (bool(bc[j]), bool(fc[j])),
                           consistency_constant(phi, s, g, h))
        curves.append(c)
        if check and gaps[j] > opts.tol:
            prev = None
            if fprev is not None and bprev is not None:
                pg = np.concatenate([bprev[0][j, :bprev[1][j]][::-1], fprev[0][j, 1:fprev[1][j]]])
                ps = s0[j] + h * np.arange(-(bprev[1][j] - 1), fprev[1][j])
                prev = Characteristic(ps, pg, h, s0[j], selection)
            raise ConvergenceError(
                f"eps-ladder did not settle at ({s0[j]:.6g}, {t0[j]:.6g}): gap {gaps[j]:.3g} > tol {opts.tol:.3g}",
                (prev, c), float(gaps[j]))
    return curves, gaps


def _anchor(start):
    z, t = as_point(start).planar
    return np.array([z]), np.array([t])


def integrate(phi: ScalarField, start, s_range, opts: FlowOptions = FlowOptions()) -> Characteristic:
    """A solution through ``start`` by fixed-step classical RK4 (no selection)."""
    s0, t0 = _anchor(start)
    curves, _ = curves_many(phi, s0, t0, s_range, opts, Selection.GENERIC, Selection.GENERIC, Selection.GENERIC)
    return curves[0]


def extremal(phi: ScalarField, start, side: Selection, s_range, opts: FlowOptions = FlowOptions()) -> Characteristic:
    """Approximate minimal or maximal solution through ``start`` on both sides."""
    side = Selection(side)
    if side not in (Selection.MINIMAL, Selection.MAXIMAL):
        raise CharacteristicError("side must be minimal or maximal")
    s0, t0 = _anchor(start)
    curves, _ = curves_many(phi, s0, t0, s_range, opts, side, side, side, all_levels=True)
    return curves[0]


def merged(phi: ScalarField, start, s_range, opts: FlowOptions = FlowOptions()) -> Characteristic:
    """Minimal branch forward of the anchor joined to the maximal branch behind it."""
    s0, t0 = _anchor(start)
    curves, _ = curves_many(phi, s0, t0, s_range, opts, Selection.MAXIMAL, Selection.MINIMAL,
                            Selection.MERGED, all_levels=True)
    return curves[0]


# ---------------------------------------------------------------------------
# estimates along curves


def values_along(phi: ScalarField, curve: Characteristic) -> np.ndarray:
    return phi.values(curve.s, curve.gamma)


def lipschitz_along(phi: ScalarField, curve: Characteristic) -> float:
    """Discrete Lipschitz constant of ``s -> phi(s, gamma(s))``.

    The max over all sample pairs equals the max over adjacent pairs, since a
    chord slope is a weighted mean of the adjacent slopes it spans.
    """
    if len(curve) < 3:
        raise CharacteristicError("curve needs at least 3 samples")
    f = values_along(phi, curve)
    return float(np.max(np.abs(np.diff(f)) / np.diff(curve.s)))


def _strip_integral(field, s, lo, eps, m):
    """``int_{lo}^{lo+eps} field(s, t) dt`` per entry of (s, lo), Simpson with m intervals."""
    u = np.linspace(0.0, 1.0, m + 1)
    T = lo[:, None] + eps * u[None, :]
    S = np.broadcast_to(np.asarray(s)[:, None], T.shape)
    return simpson(field.values(S, T), dx=eps / m, axis=1)


def dafermos_defect(phi: ScalarField, w: ScalarField, curve: Characteristic, a: float, b: float,
                    eps: float, inner: int = 400) -> tuple[float, float]:
    """Strip balance above a characteristic between ``s = a`` and ``s = b``.

    ``lhs`` is the change of ``int phi dt`` over ``[gamma, gamma + eps]`` minus
    the source collected in the strip.  For a weak solution it equals
    ``-1/2 int (phi(s, gamma + eps) - phi(s, gamma))^2 ds``; ``defect`` is the
    difference, so both ``defect ~ 0`` and ``lhs <= 0``.
    """
    if not (curve.s[0] - 1e-12 <= a < b <= curve.s[-1] + 1e-12) or eps <= 0:
        raise CharacteristicError("need s_start <= a < b <= s_end and eps > 0")
    ia, ib = curve.index_of(a), curve.index_of(b)
    s, g = curve.s[ia:ib + 1], curve.gamma[ia:ib + 1]
    dom = phi.domain
    if dom is not None and (g.min() < dom.t_lo - 1e-12 or g.max() + eps > dom.t_hi + 1e-12):
        raise CharacteristicError("strip leaves the domain")
    ends = _strip_integral(phi, s[[0, -1]], g[[0, -1]], eps, inner)
    src = simpson(_strip_integral(w, s, g, eps, inner), x=s)
    lhs = float(ends[1] - ends[0] - src)
    jump = phi.values(s, g + eps) - phi.values(s, g)
    defect = lhs + 0.5 * float(simpson(jump * jump, x=s))
    return lhs, defect


def h_sequence(count: int, h1: float = 0.5) -> np.ndarray:
    """``h_{n+1} = h_n - h_n^2`` starting from ``h1``."""
    out = np.empty(count)
    h = h1
    for i in range(count):
        out[i] = h
        h = h - h * h
    return out


def _windows(room: int, min_width: int) -> list[int]:
    widths = []
    for hn in h_sequence(10 * room + 10):
        m = int(round(hn * room))
        if m < min_width:
            break
        if not widths or m < widths[-1]:
            widths.append(m)
    return widths


def quotient_limit(f, i0: int, h: float, side: str = "symmetric", levels: int = 4, tol: float = 1e-2,
                   min_width: int = 8):
    """Limit of difference quotients of sampled ``f`` at index ``i0``.

    Windows follow :func:`h_sequence` scaled by the room available on the
    requested side.  Returns ``(value, width)`` when the last ``levels``
    quotients agree within ``tol``, else ``(MULTIVALUED, width)``.
    """
    n = len(f)
    room = {"symmetric": min(i0, n - 1 - i0), "right": n - 1 - i0, "left": i0}[side]
    if room < min_width:
        raise CharacteristicError("window exits the curve range")
    m = np.array(_windows(room, min_width))
    if side == "symmetric":
        q = (f[i0 + m] - f[i0 - m]) / (2 * m * h)
    elif side == "right":
        q = (f[i0 + m] - f[i0]) / (m * h)
    else:
        q = (f[i0] - f[i0 - m]) / (m * h)
    width = float(m[-1] * h)
    tail = q[-levels:]
    if len(tail) < levels or not np.all(np.isfinite(tail)) or tail.max() - tail.min() > tol:
        return MULTIVALUED, width
    return float(tail[-1]), width


def second_derivative_along(phi: ScalarField, curve: Characteristic, s_star: float, levels: int = 4,
                            tol: float = 1e-2, side: str = "symmetric", min_width: int = 8):
    """Derivative of ``s -> phi(s, gamma(s))`` at ``s_star`` (that is, gamma'').

    Difference quotients over windows ``h_n * R`` (R = room around
    ``s_star``), rounded to whole samples and stopped at ``min_width``
    samples.  Returns ``(value, width)`` if the last ``levels`` quotients lie
    within ``tol`` of each other, else ``(MULTIVALUED, width)``.
    """
    if levels < 3:
        raise CharacteristicError("levels must be >= 3")
    if side not in ("symmetric", "right", "left"):
        raise CharacteristicError("side must be symmetric, right or left")
    i0 = curve.index_of(s_star)
    n = len(curve)
    if not (0 < i0 < n - 1) or abs(curve.s[i0] - s_star) > 0.5 * curve.h + 1e-12:
        raise CharacteristicError("s_star must be interior to the curve range")
    return quotient_limit(values_along(phi, curve), i0, curve.h, side, levels, tol, min_width)
