"""Compiled evaluation and integration kernels.

Every field is lowered to a small program ``(kind, code, consts, data)`` so a
single set of compiled kernels serves all fields:

* kind 0 -- expression in reverse Polish notation over ``code``/``consts``
* kind 1 -- bilinear grid, ``data = [z_lo, z_hi, t_lo, t_hi, nz, nt, values...]``
* kind 2/3 -- block field (value / derivative), ``data = [levels, nodes...]``
* kind 4 -- grid as kind 1 but nearest-node (piecewise constant cells)
"""
import math

import numpy as np
from numba import njit

KIND_EXPR = 0
KIND_GRID = 1
KIND_BLOCK_PHI = 2
KIND_BLOCK_W = 3
KIND_CELLS = 4

OP_CONST = 0
OP_Z = 1
OP_T = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_NEG = 7
OP_SQRT = 8
OP_ABS = 9
OP_SIGN = 10
OP_SIN = 11
OP_COS = 12
OP_POWI = 13
OP_STEP = 14
OP_EXP = 15
OP_LOG = 16

STACK_SIZE = 64


@njit(cache=True)
def _eval_expr(code, consts, stack, z, t):
    sp = 0
    n = code.shape[0] // 2
    for k in range(n):
        op = code[2 * k]
        arg = code[2 * k + 1]
        if op == OP_CONST:
            stack[sp] = consts[arg]
            sp += 1
        elif op == OP_Z:
            stack[sp] = z
            sp += 1
        elif op == OP_T:
            stack[sp] = t
            sp += 1
        elif op <= OP_DIV:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                stack[sp - 1] = a + b
            elif op == OP_SUB:
                stack[sp - 1] = a - b
            elif op == OP_MUL:
                stack[sp - 1] = a * b
            else:
                if b == 0.0:
                    return np.nan
                stack[sp - 1] = a / b
        else:
            a = stack[sp - 1]
            if op == OP_NEG:
                r = -a
            elif op == OP_SQRT:
                if a < 0.0:
                    return np.nan
                r = math.sqrt(a)
            elif op == OP_ABS:
                r = abs(a)
            elif op == OP_SIGN:
                r = 1.0 if a > 0.0 else (-1.0 if a < 0.0 else 0.0)
            elif op == OP_SIN:
                r = math.sin(a)
            elif op == OP_COS:
                r = math.cos(a)
            elif op == OP_POWI:
                if arg < 0 and a == 0.0:
                    return np.nan
                r = a ** arg
            elif op == OP_STEP:
                r = 1.0 if a >= 0.0 else 0.0
            elif op == OP_EXP:
                r = math.exp(a)
            else:
                if a <= 0.0:
                    return np.nan
                r = math.log(a)
            stack[sp - 1] = r
    return stack[0]


@njit(cache=True)
def _eval_grid(data, z, t):
    z_lo, z_hi, t_lo, t_hi = data[0], data[1], data[2], data[3]
    nz = int(data[4])
    nt = int(data[5])
    tol = 1e-12 * max(1.0, z_hi - z_lo, t_hi - t_lo)
    if z < z_lo - tol or z > z_hi + tol or t < t_lo - tol or t > t_hi + tol:
        return np.nan
    fz = (min(max(z, z_lo), z_hi) - z_lo) / (z_hi - z_lo) * (nz - 1)
    ft = (min(max(t, t_lo), t_hi) - t_lo) / (t_hi - t_lo) * (nt - 1)
    i = min(int(math.floor(fz)), nz - 2)
    k = min(int(math.floor(ft)), nt - 2)
    a = fz - i
    b = ft - k
    base = 6
    v00 = data[base + i * nt + k]
    # exact at nodes: skip the blend when a weight vanishes
    if a == 0.0 and b == 0.0:
        return v00
    v01 = data[base + i * nt + k + 1]
    v10 = data[base + (i + 1) * nt + k]
    v11 = data[base + (i + 1) * nt + k + 1]
    if a == 0.0:
        return v00 + b * (v01 - v00)
    if b == 0.0:
        return v00 + a * (v10 - v00)
    return (1 - a) * ((1 - b) * v00 + b * v01) + a * ((1 - b) * v10 + b * v11)


@njit(cache=True)
def _eval_cells(data, z, t):
    z_lo, z_hi, t_lo, t_hi = data[0], data[1], data[2], data[3]
    nz = int(data[4])
    nt = int(data[5])
    dz = (z_hi - z_lo) / (nz - 1)
    dt = (t_hi - t_lo) / (nt - 1)
    # cells extend half a spacing beyond the outer nodes
    if z < z_lo - 0.5 * dz or z > z_hi + 0.5 * dz or t < t_lo - 0.5 * dt or t > t_hi + 0.5 * dt:
        return np.nan
    i = min(max(int(math.floor((z - z_lo) / dz + 0.5)), 0), nz - 1)
    k = min(max(int(math.floor((t - t_lo) / dt + 0.5)), 0), nt - 1)
    return data[6 + i * nt + k]


@njit(cache=True)
def kepler_parabolic(y):
    """Solve ``u - sin(2 pi u) / (2 pi) = y`` for u in [0, 1/2], y in [0, 1/2].

    Safeguarded Newton on E = 2 pi u (the map is convex on [0, pi]); a short
    series covers tiny y where the residual loses relative precision.
    """
    m = 2.0 * math.pi * y
    if m <= 0.0:
        return 0.0
    c = (6.0 * m) ** (1.0 / 3.0)
    if c < 2e-2:
        c2 = c * c
        return c * (1.0 + c2 / 60.0 + c2 * c2 / 1400.0) / (2.0 * math.pi)
    lo = 0.0
    hi = math.pi
    e = min(c, math.pi)
    for _ in range(60):
        f = e - math.sin(e) - m
        if f > 0.0:
            hi = e
        elif f < 0.0:
            lo = e
        else:
            break
        d = 2.0 * math.sin(0.5 * e) ** 2
        step = f / d
        nxt = e - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        elif abs(step) < 1e-9 * e:
            # quadratic convergence: one more step reaches round-off
            e = nxt
            e -= (e - math.sin(e) - m) / (2.0 * math.sin(0.5 * e) ** 2)
            break
        e = nxt
    return e / (2.0 * math.pi)


@njit(cache=True)
def _block_locate(data, t):
    """Return (level, local height in [0,1]) for the block containing t, or (0, 0)."""
    levels = int(data[0])
    if t >= data[1] or t <= data[1 + levels]:
        return 0, 0.0
    i = 1
    while i <= levels and t < data[1 + i]:
        i += 1
    top = data[i]
    height = 2.0 ** (-2 * i) / math.log(i + 2.0)
    nblocks = 2 ** i
    h = int(math.floor((top - t) / height))
    if h < 0:
        h = 0
    if h > nblocks - 1:
        h = nblocks - 1
    bottom = top - (h + 1) * height
    y = (t - bottom) / height
    if y < 0.0:
        y = 0.0
    if y > 1.0:
        y = 1.0
    return i, y


@njit(cache=True)
def _eval_block(data, t, derivative):
    i, y = _block_locate(data, t)
    if i == 0:
        return 0.0
    if y <= 0.5:
        u = kepler_parabolic(y)
    else:
        u = 1.0 - kepler_parabolic(1.0 - y)
    e = 2.0 * math.pi * u
    if derivative:
        return 2.0 * math.pi * math.sin(e) / math.log(i + 2.0)
    return 2.0 * math.sin(0.5 * e) ** 2 / (2.0 ** i * math.log(i + 2.0))


@njit(cache=True)
def field_value(kind, code, consts, data, stack, z, t):
    if kind == KIND_EXPR:
        return _eval_expr(code, consts, stack, z, t)
    if kind == KIND_GRID:
        return _eval_grid(data, z, t)
    if kind == KIND_CELLS:
        return _eval_cells(data, z, t)
    if kind == KIND_BLOCK_PHI:
        return _eval_block(data, t, False)
    return _eval_block(data, t, True)


@njit(cache=True)
def eval_points(kind, code, consts, data, zs, ts, out):
    stack = np.empty(STACK_SIZE)
    for j in range(zs.shape[0]):
        out[j] = field_value(kind, code, consts, data, stack, zs[j], ts[j])


@njit(cache=True)
def march(kind, code, consts, data, s0, y0, h, nsteps, nsub, shift, lo, hi, out, exits):
    """Fixed-step RK4 for many curves of y' = f(s, y) + shift.

    Curve j starts at (s0[j], y0[j]) and takes nsteps[j] output steps of signed
    size h[j], each split into nsub equal substeps.  States are clamped to
    [lo, hi]; exits[j] is the first output index at which a clamp happened
    (-1 if never).  Rows of ``out`` beyond nsteps[j] are left untouched.
    A non-finite field value stops the curve and marks exits[j] = -2.
    """
    stack = np.empty(STACK_SIZE)
    for j in range(y0.shape[0]):
        y = y0[j]
        out[j, 0] = y
        exits[j] = -1
        hs = h[j] / nsub
        half = 0.5 * hs
        for i in range(nsteps[j]):
            clipped = False
            for k in range(nsub):
                s = s0[j] + h[j] * i + hs * k
                k1 = field_value(kind, code, consts, data, stack, s, y) + shift
                y2 = min(max(y + half * k1, lo), hi)
                k2 = field_value(kind, code, consts, data, stack, s + half, y2) + shift
                y3 = min(max(y + half * k2, lo), hi)
                k3 = field_value(kind, code, consts, data, stack, s + half, y3) + shift
                y4 = min(max(y + hs * k3, lo), hi)
                k4 = field_value(kind, code, consts, data, stack, s + hs, y4) + shift
                yn = y + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if not math.isfinite(yn):
                    exits[j] = -2
                    break
                if yn > hi:
                    yn = hi
                    clipped = True
                elif yn < lo:
                    yn = lo
                    clipped = True
                y = yn
            if exits[j] == -2:
                break
            out[j, i + 1] = y
            if clipped and exits[j] < 0:
                exits[j] = i + 1
