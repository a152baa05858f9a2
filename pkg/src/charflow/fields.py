"""Scalar fields on planar rectangles, test functions and lattice norms.

A :class:`ScalarField` is either an analytic expression in ``z`` and ``t``, a
sampled uniform grid with bilinear interpolation, or the oscillating block
profile used by the gallery.  Every kind is lowered to a compiled program so
characteristic integration runs without Python callbacks.
"""
from __future__ import annotations

import ast
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K


class FieldError(ValueError):
    """Raised for malformed field definitions."""


class FieldEvaluationError(ValueError):
    """Raised when a field cannot be evaluated at a point."""

    def __init__(self, message: str, point=None):
        super().__init__(message if point is None else f"{message} at {point}")
        self.point = point


class BoundViolation(FieldEvaluationError):
    """A value exceeded the field's cached sup-norm bound."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned rectangle ``[z_lo, z_hi] x [t_lo, t_hi]``.

    For ``n >= 2`` the rectangle is a planar section; ``frozen_coords`` holds
    the ``2n - 2`` fixed remaining horizontal coordinates.
    """

    z_lo: float
    z_hi: float
    t_lo: float
    t_hi: float
    n: int = 1
    frozen_coords: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "frozen_coords", tuple(float(c) for c in self.frozen_coords))
        if not (self.z_lo < self.z_hi and self.t_lo < self.t_hi):
            raise FieldError(f"degenerate domain {self}")
        if self.n < 1:
            raise FieldError("n must be a positive integer")
        want = 0 if self.n == 1 else 2 * self.n - 2
        if len(self.frozen_coords) != want:
            raise FieldError(f"n={self.n} needs {want} frozen coordinates, got {len(self.frozen_coords)}")

    @property
    def width(self) -> float:
        return self.z_hi - self.z_lo

    @property
    def height(self) -> float:
        return self.t_hi - self.t_lo

    def contains(self, z: float, t: float, tol: float = 1e-12) -> bool:
        return (self.z_lo - tol <= z <= self.z_hi + tol) and (self.t_lo - tol <= t <= self.t_hi + tol)

    def lattice(self, nz: int, nt: int | None = None):
        """Uniform node coordinates including the boundary."""
        nt = nz if nt is None else nt
        return np.linspace(self.z_lo, self.z_hi, nz), np.linspace(self.t_lo, self.t_hi, nt)

    def to_dict(self) -> dict:
        d = {"z_lo": self.z_lo, "z_hi": self.z_hi, "t_lo": self.t_lo, "t_hi": self.t_hi}
        if self.n != 1:
            d["n"] = self.n
            d["frozen_coords"] = list(self.frozen_coords)
        return d


@dataclass(frozen=True)
class GraphPoint:
    """A point ``(z, t)``; ``z`` is a scalar for n = 1 or a vector of length 2n-1."""

    z: object
    t: float

    def __post_init__(self):
        z = self.z
        if np.ndim(z) == 0:
            z = float(z)
            ok = math.isfinite(z)
        else:
            z = tuple(float(v) for v in z)
            ok = all(math.isfinite(v) for v in z) and len(z) % 2 == 1
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "t", float(self.t))
        if not (ok and math.isfinite(self.t)):
            raise ValueError(f"invalid graph point {self.z!r}, {self.t!r}")

    @property
    def n(self) -> int:
        return 1 if isinstance(self.z, float) else (len(self.z) + 1) // 2

    @property
    def zvec(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.z, dtype=float))

    @property
    def planar(self) -> tuple[float, float]:
        """Coordinates in the planar section: the n-th horizontal coordinate and t."""
        if isinstance(self.z, float):
            return self.z, self.t
        return self.z[self.n - 1], self.t


def as_point(p) -> GraphPoint:
    if isinstance(p, GraphPoint):
        return p
    z, t = p
    return GraphPoint(z, t)


# ---------------------------------------------------------------------------
# expression compiler

_UNARY = {
    "sqrt": K.OP_SQRT, "abs": K.OP_ABS, "sign": K.OP_SIGN, "sgn": K.OP_SIGN,
    "sin": K.OP_SIN, "cos": K.OP_COS, "exp": K.OP_EXP, "log": K.OP_LOG,
    "step": K.OP_STEP, "neg": K.OP_NEG,
}
_BINARY = {"add": K.OP_ADD, "sub": K.OP_SUB, "mul": K.OP_MUL, "div": K.OP_DIV}
_BINOPS = {ast.Add: K.OP_ADD, ast.Sub: K.OP_SUB, ast.Mult: K.OP_MUL, ast.Div: K.OP_DIV}
_NAMES = {"pi": math.pi, "e": math.e}


def _int_exponent(node) -> int:
    try:
        v = ast.literal_eval(node)
    except ValueError:
        v = None
    if isinstance(v, (int, float)) and float(v).is_integer():
        return int(v)
    raise FieldError("only integer powers are supported")


class _Compiler:
    def __init__(self):
        self.code: list[int] = []
        self.consts: list[float] = []
        self.depth = 0
        self.max_depth = 0

    def _push(self, op, arg=0, delta=0):
        self.code += [op, arg]
        self.depth += delta
        self.max_depth = max(self.max_depth, self.depth)

    def const(self, v: float):
        self.consts.append(float(v))
        self._push(K.OP_CONST, len(self.consts) - 1, 1)

    def visit(self, node):
        if isinstance(node, ast.Expression):
            return self.visit(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return self.const(node.value)
        if isinstance(node, ast.Name):
            if node.id == "z":
                return self._push(K.OP_Z, 0, 1)
            if node.id == "t":
                return self._push(K.OP_T, 0, 1)
            if node.id in _NAMES:
                return self.const(_NAMES[node.id])
            raise FieldError(f"unknown name {node.id!r}")
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self.visit(node.operand)
            if isinstance(node.op, ast.USub):
                self._push(K.OP_NEG)
            return None
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Pow):
                self.visit(node.left)
                return self._push(K.OP_POWI, _int_exponent(node.right))
            if type(node.op) in _BINOPS:
                self.visit(node.left)
                self.visit(node.right)
                return self._push(_BINOPS[type(node.op)], 0, -1)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            name, args = node.func.id, node.args
            if name in _UNARY and len(args) == 1:
                self.visit(args[0])
                return self._push(_UNARY[name])
            if name in _BINARY and len(args) == 2:
                self.visit(args[0])
                self.visit(args[1])
                return self._push(_BINARY[name], 0, -1)
            if name == "pow" and len(args) == 2:
                self.visit(args[0])
                return self._push(K.OP_POWI, _int_exponent(args[1]))
            raise FieldError(f"unsupported call {name}/{len(args)}")
        raise FieldError(f"unsupported syntax: {ast.dump(node)}")


def compile_expression(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Compile an expression such as ``sqrt(abs(t))`` to a stack program."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise FieldError(f"cannot parse expression {text!r}: {exc.msg}") from None
    c = _Compiler()
    c.visit(tree)
    if c.max_depth > K.STACK_SIZE:
        raise FieldError("expression too deeply nested")
    consts = np.array(c.consts or [0.0], dtype=np.float64)
    return np.array(c.code, dtype=np.int64), consts


# ---------------------------------------------------------------------------
# fields

_EMPTY_I = np.zeros(2, dtype=np.int64)
_EMPTY_F = np.zeros(1, dtype=np.float64)

SUP_RESOLUTION = 257


class ScalarField:
    """A continuous real function of ``(z, t)``.

    Build with :meth:`analytic`, :meth:`sampled`, :meth:`from_csv` or
    :meth:`constant`.  Instances are immutable; the sup-norm bound is
    estimated on first use unless supplied.
    """

    __slots__ = ("kind", "expression", "domain", "_prog", "_bound", "_values")

    def __init__(self, kind, program, domain=None, expression=None, bound=None, values=None):
        self.kind = kind
        self.expression = expression
        self.domain = domain
        self._prog = program
        self._bound = None if bound is None else float(bound)
        self._values = values

    # construction -----------------------------------------------------------
    @classmethod
    def analytic(cls, expression: str, domain: Domain | None = None, bound: float | None = None):
        code, consts = compile_expression(expression)
        return cls("analytic", (K.KIND_EXPR, code, consts, _EMPTY_F), domain, expression, bound)

    @classmethod
    def constant(cls, c: float, domain: Domain | None = None):
        return cls.analytic(repr(float(c)), domain, abs(float(c)))

    @classmethod
    def sampled(cls, domain: Domain, values, cells: bool = False):
        """Uniform lattice over ``domain`` (nodes on its boundary).

        Bilinear interpolation by default; with ``cells`` each node owns the
        surrounding cell (nearest node), which suits discontinuous data.
        """
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or min(values.shape) < 2:
            raise FieldError("sampled values need shape (nz, nt) with nz, nt >= 2")
        if not np.all(np.isfinite(values)):
            raise FieldError("sampled values must be finite")
        nz, nt = values.shape
        head = [domain.z_lo, domain.z_hi, domain.t_lo, domain.t_hi, nz, nt]
        data = np.concatenate([np.array(head, dtype=np.float64), values.ravel()])
        values.setflags(write=False)
        bound = float(np.abs(values).max())
        kind = K.KIND_CELLS if cells else K.KIND_GRID
        return cls("sampled", (kind, _EMPTY_I, _EMPTY_F, data), domain, None, bound, values)

    @classmethod
    def blocks(cls, nodes: Sequence[float], domain: Domain, derivative: bool = False, bound=None):
        """Oscillating block profile in t between decreasing ``nodes`` (see gallery)."""
        data = np.array([len(nodes) - 1, *nodes], dtype=np.float64)
        kind = K.KIND_BLOCK_W if derivative else K.KIND_BLOCK_PHI
        return cls("blocks", (kind, _EMPTY_I, _EMPTY_F, data), domain, None, bound)

    @classmethod
    def from_csv(cls, path) -> "ScalarField":
        """Load a sampled field from CSV with header ``z,t,value``."""
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["z", "t", "value"]:
            raise FieldError(f"{path}: expected header z,t,value")
        try:
            arr = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=np.float64)
        except ValueError as exc:
            raise FieldError(f"{path}: {exc}") from None
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise FieldError(f"{path}: rows must have three columns")
        zs, ts = np.unique(arr[:, 0]), np.unique(arr[:, 1])
        if len(zs) < 2 or len(ts) < 2 or len(arr) != len(zs) * len(ts):
            raise FieldError(f"{path}: values do not form a complete lattice")
        for ax in (zs, ts):
            d = np.diff(ax)
            if not np.allclose(d, d[0], rtol=1e-6, atol=0):
                raise FieldError(f"{path}: lattice is not uniform")
        grid = np.full((len(zs), len(ts)), np.nan)
        grid[np.searchsorted(zs, arr[:, 0]), np.searchsorted(ts, arr[:, 1])] = arr[:, 2]
        if np.isnan(grid).any():
            raise FieldError(f"{path}: duplicate lattice nodes")
        return cls.sampled(Domain(zs[0], zs[-1], ts[0], ts[-1]), grid)

    def to_csv(self, path, resolution: int = 65, domain: Domain | None = None) -> None:
        """Write ``z,t,value`` rows, row-major with t varying fastest."""
        if self.kind == "sampled" and domain is None:
            zs, ts = self.grid_axes()
            vals = self._values
        else:
            dom = domain or self.domain
            if dom is None:
                raise FieldError("a domain is needed to sample this field")
            zs, ts = dom.lattice(resolution)
            vals = self.on_lattice(zs, ts)
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z", "t", "value"])
            for i, z in enumerate(zs):
                for k, t in enumerate(ts):
                    wr.writerow([repr(float(z)), repr(float(t)), repr(float(vals[i, k]))])

    # access -----------------------------------------------------------------
    @property
    def program(self):
        """``(kind, code, consts, data)`` for the compiled kernels."""
        return self._prog

    @property
    def grid_values(self) -> np.ndarray:
        if self._values is None:
            raise FieldError("not a sampled field")
        return self._values

    def grid_axes(self):
        if self._values is None:
            raise FieldError("not a sampled field")
        return self.domain.lattice(*self._values.shape)

    @property
    def bound(self) -> float:
        """Cached sup-norm estimate over the field's domain."""
        if self._bound is None:
            if self.domain is None:
                raise FieldError("bound needs a domain or an explicit value")
            self._bound = sup_norm(self, self.domain, SUP_RESOLUTION)
        return self._bound

    def _check(self, z, t, v, bound):
        bad = ~np.isfinite(v)
        if bad.any():
            j = int(np.flatnonzero(bad.ravel())[0])
            p = (float(np.ravel(z)[j]), float(np.ravel(t)[j]))
            why = "outside the sampled domain" if self.kind == "sampled" else "expression undefined"
            raise FieldEvaluationError(why, p)
        if bound is not None:
            over = np.abs(v) > bound * (1 + 1e-9) + 1e-12
            if over.any():
                j = int(np.flatnonzero(over.ravel())[0])
                p = (float(np.ravel(z)[j]), float(np.ravel(t)[j]))
                raise BoundViolation(f"|value| {np.ravel(v)[j]!r} exceeds bound {bound!r}", p)

    def values(self, z, t, check_bound: bool = True) -> np.ndarray:
        """Vectorised evaluation with broadcasting."""
        zb, tb = np.broadcast_arrays(np.asarray(z, dtype=np.float64), np.asarray(t, dtype=np.float64))
        zf = np.ascontiguousarray(zb).ravel()
        tf = np.ascontiguousarray(tb).ravel()
        out = np.empty(zf.shape[0])
        kind, code, consts, data = self._prog
        K.eval_points(kind, code, consts, data, zf, tf, out)
        out = out.reshape(zb.shape)
        self._check(zb, tb, out, self._bound if check_bound else None)
        return out

    def __call__(self, z, t):
        v = self.values(z, t)
        return float(v) if v.ndim == 0 else v

    def on_lattice(self, zs, ts, check_bound: bool = True) -> np.ndarray:
        """Values on the tensor lattice, shape ``(len(zs), len(ts))``."""
        Z, T = np.meshgrid(np.asarray(zs, float), np.asarray(ts, float), indexing="ij")
        return self.values(Z, T, check_bound)

    def describe(self) -> str:
        if self.kind == "analytic":
            return self.expression
        if self.kind == "sampled":
            how = "cells" if self._prog[0] == K.KIND_CELLS else "bilinear"
            return "sampled {}x{} {}".format(*self._values.shape, how)
        return "block profile"

    def __repr__(self):
        return f"ScalarField({self.describe()!r})"


def eval_field(field: ScalarField, point) -> float:
    """Field value at a point (a :class:`GraphPoint` or a ``(z, t)`` pair)."""
    z, t = as_point(point).planar
    return float(field.values(z, t))


def sup_norm(field: ScalarField, domain: Domain, resolution: int) -> float:
    """Max of ``|field|`` over the ``resolution x resolution`` lattice.

    The lattices of ``resolution // 2``, ``resolution // 4`` ... are included
    as well, so doubling the resolution never lowers the estimate.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    best = 0.0
    r = resolution
    while r >= 2:
        zs, ts = domain.lattice(r)
        best = max(best, float(np.abs(field.on_lattice(zs, ts, check_bound=False)).max()))
        r //= 2
    return best


# ---------------------------------------------------------------------------
# test functions


def _bump(x):
    """Standard bump ``exp(-1/(1-x^2))`` and its derivative, vectorised."""
    x = np.asarray(x, dtype=np.float64)
    inside = np.abs(x) < 1
    q = np.where(inside, 1.0 - x * x, 1.0)
    b = np.where(inside, np.exp(-1.0 / q), 0.0)
    db = np.where(inside, b * (-2.0 * x / (q * q)), 0.0)
    return b, db


@dataclass(frozen=True)
class TestFunction:
    """Tensor-product bump supported on ``center +- radii``."""

    __test__ = False  # not a pytest class

    center: tuple
    radii: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.center) != 2 or len(self.radii) != 2 or min(self.radii) <= 0:
            raise ValueError("need a 2D center and positive radii")

    @property
    def support(self) -> Domain:
        (zc, tc), (rz, rt) = self.center, self.radii
        return Domain(zc - rz, zc + rz, tc - rt, tc + rt)

    def fits(self, domain: Domain) -> bool:
        s = self.support
        return (domain.z_lo <= s.z_lo and s.z_hi <= domain.z_hi
                and domain.t_lo <= s.t_lo and s.t_hi <= domain.t_hi)

    def evaluate(self, z, t):
        """Arrays ``(value, d/dz, d/dt)``."""
        (zc, tc), (rz, rt) = self.center, self.radii
        bz, dbz = _bump((np.asarray(z, float) - zc) / rz)
        bt, dbt = _bump((np.asarray(t, float) - tc) / rt)
        return bz * bt, dbz * bt / rz, bz * dbt / rt


def bump_eval(tf: TestFunction, point) -> tuple[float, float, float]:
    """Value and first partials of a test function at a point."""
    z, t = as_point(point).planar
    v, dz, dt = tf.evaluate(z, t)
    return float(v), float(dz), float(dt)
