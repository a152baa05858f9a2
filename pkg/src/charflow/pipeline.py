"""Batch runs: config loading, the check registry, artifacts and fan SVGs."""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .characteristics import Characteristic, FlowOptions, Selection, curves_many, dafermos_defect, lipschitz_along
from .fields import Domain, FieldError, ScalarField, sup_norm
from .gallery import NAMES, gallery
from .lagrangian import (
    FULL, build_full_param, build_minimal_param, extend_param, mollified_relation_error, mollify_param,
)
from .verification import (
    CheckRecord, VerificationReport, broad_representative, check_broad, holder_vertical_check,
    random_bumps, relative_residual,
)

__all__ = ["ConfigError", "RunConfig", "RunResult", "CHECKS", "DEFAULT_CHECKS", "load_config", "run",
           "emit_fan_svg", "fan_curves"]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


DEFAULT_RESOLUTION = {
    "h": 1e-3,
    "curves": 50,
    "strip_eps": 0.01,
    "bumps": 10,
    "quad_res": 129,
    "broad_grid": [5, 10001],
    "holder_pairs": 2000,
    "param": 64,
    "mollify_eps": [0.1, 0.05, 0.025],
    "fan_anchors": 20,
    "extension_launches": 2048,
    "extension_depth": 5,
    "extension_h": 2.0 ** -10,
}

DEFAULT_TOLERANCES = {
    "dafermos_bound": 1e-2,
    "dafermos_identity": 1e-4,
    "residual": 5e-3,
    "broad": 1e-2,
    "holder": 0.0,
    "param": 0.0,
    "mollify": 0.0,
    "extension": 0.0,
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "instance": {"enum": list(NAMES)},
        "fields": {
            "type": "object",
            "additionalProperties": False,
            "required": ["phi", "w"],
            "properties": {"phi": {"type": "string"}, "w": {"type": "string"}},
        },
        "checks": {
            "oneOf": [
                {"const": "all"},
                {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
            ]
        },
        "seed": {"type": "integer", "minimum": 0},
        "tolerances": {"type": "object", "additionalProperties": _NUM},
        "resolution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "h": _POS,
                "curves": _POS_INT,
                "strip_eps": _POS,
                "bumps": _POS_INT,
                "quad_res": {"type": "integer", "minimum": 16},
                "broad_grid": {"type": "array", "items": {"type": "integer", "minimum": 2},
                               "minItems": 2, "maxItems": 2},
                "holder_pairs": _POS_INT,
                "param": {"type": "integer", "minimum": 2},
                "mollify_eps": {"type": "array", "items": _POS, "minItems": 1},
                "fan_anchors": {"type": "integer", "minimum": 0},
                "extension_launches": {"type": "integer", "minimum": 2},
                "extension_depth": _POS_INT,
                "extension_h": _POS,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "report": {"type": ["string", "null"]},
                "curves": {"type": ["string", "null"]},
                "svg": {"type": ["string", "null"]},
                "param": {"type": ["string", "null"]},
            },
        },
    },
    "oneOf": [{"required": ["instance"]}, {"required": ["fields"]}],
}


@dataclass
class RunConfig:
    """Validated run settings; see :data:`SCHEMA` for the file layout."""

    instance: str | None = None
    fields: dict | None = None
    checks: list = field(default_factory=list)
    seed: int = 0
    tolerances: dict = field(default_factory=dict)
    resolution: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from None
        checks = data.get("checks", "all")
        checks = list(DEFAULT_CHECKS) if checks == "all" else list(checks)
        unknown = [c for c in checks if c not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; valid: {', '.join(CHECKS)}")
        base = Path(base_dir)
        fields = data.get("fields")
        if fields:
            for key, rel in fields.items():
                path = base / rel
                if not path.is_file():
                    raise ConfigError(f"field file for {key!r} not found: {path}")
        out = {"dir": "out", "report": "report.json", "curves": "curves", "svg": "fan.svg", "param": None}
        out.update(data.get("output", {}))
        return cls(data.get("instance"), fields, checks, int(data.get("seed", 0)),
                   {**DEFAULT_TOLERANCES, **data.get("tolerances", {})},
                   {**DEFAULT_RESOLUTION, **data.get("resolution", {})}, out, base)

    def to_dict(self) -> dict:
        d = {"checks": self.checks, "seed": self.seed, "tolerances": self.tolerances,
             "resolution": self.resolution, "output": self.output}
        if self.instance:
            d["instance"] = self.instance
        if self.fields:
            d["fields"] = self.fields
        return d


def _set_path(data: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted}: {k} is not a mapping")
        cur = nxt
    cur[keys[-1]] = value


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style floats (YAML 1.1 wants a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _yaml(text):
    return yaml.load(text, Loader=_Loader)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML or JSON config file and apply ``key.sub=value`` overrides.

    Override values are parsed as YAML scalars or flow collections, so
    ``checks=[residual,holder]`` and ``resolution.h=2e-3`` both work.
    """
    data, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = _yaml(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.parent
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = _yaml(raw)
        except yaml.YAMLError:
            value = raw
        _set_path(data, key.strip(), value)
    return RunConfig.from_dict(data, base)


# ---------------------------------------------------------------------------
# run context and checks


@dataclass
class _Context:
    cfg: RunConfig
    phi: ScalarField
    w: ScalarField
    domain: Domain
    opts: FlowOptions
    _curves: list | None = None
    _param: object = None

    @property
    def res(self):
        return self.cfg.resolution

    def tol(self, name):
        return float(self.cfg.tolerances[name])

    def rng(self, salt: int):
        return np.random.default_rng([self.cfg.seed, salt])

    def curves(self) -> list[Characteristic]:
        """Merged curves through seeded anchors, shared by several checks."""
        if self._curves is None:
            d = self.domain
            rng = self.rng(1)
            n = int(self.res["curves"])
            s0 = rng.uniform(d.z_lo, d.z_hi, n)
            t0 = rng.uniform(d.t_lo, d.t_hi, n)
            self._curves, _ = curves_many(self.phi, s0, t0, (d.z_lo, d.z_hi), self.opts, Selection.MAXIMAL,
                                          Selection.MINIMAL, Selection.MERGED)
        return self._curves

    def param(self):
        if self._param is None:
            self._param = build_full_param(self.phi, self.domain, int(self.res["param"]), self.opts)
        return self._param


def _sup_w(ctx) -> float:
    return sup_norm(ctx.w, ctx.domain, 257)


def check_dafermos_bound(ctx):
    """Lipschitz constant of phi along curves against sup |w|."""
    bound = _sup_w(ctx)
    lips = [lipschitz_along(ctx.phi, c) for c in ctx.curves() if len(c) >= 3]
    return [CheckRecord("dafermos_bound", max(lips), bound, ctx.tol("dafermos_bound"), "<=",
                        {"curves": len(lips)})]


def _strip_window(c: Characteristic, domain: Domain, eps: float):
    """Longest run of samples around the anchor whose strip stays in the domain."""
    ok = (c.gamma >= domain.t_lo) & (c.gamma + eps <= domain.t_hi)
    i0 = min(max(c.index_of(c.s0), 0), len(c) - 1)
    if not ok[i0]:
        return None
    lo = i0
    while lo > 0 and ok[lo - 1]:
        lo -= 1
    hi = i0
    while hi < len(c) - 1 and ok[hi + 1]:
        hi += 1
    return (c.s[lo], c.s[hi]) if hi - lo >= 2 else None


def check_dafermos_identity(ctx):
    """Strip balance along curves: defect near zero, left side nonpositive."""
    eps = float(ctx.res["strip_eps"])
    defects, lhss = [], []
    for c in ctx.curves():
        win = _strip_window(c, ctx.domain, eps)
        if win is None:
            continue
        lhs, defect = dafermos_defect(ctx.phi, ctx.w, c, *win, eps)
        defects.append(abs(defect))
        lhss.append(lhs)
    tol = ctx.tol("dafermos_identity")
    info = {"curves": len(defects), "eps": eps}
    if not defects:
        return [CheckRecord("dafermos_identity.defect", math.nan, 0.0, tol, "<=", info)]
    return [CheckRecord("dafermos_identity.defect", max(defects), 0.0, tol, "<=", info),
            CheckRecord("dafermos_identity.lhs", max(lhss), 0.0, tol, "<=", info)]


def check_residual(ctx):
    """Relative weak-form residual over seeded bumps."""
    bumps = random_bumps(ctx.domain, int(ctx.res["bumps"]), seed=ctx.cfg.seed)
    q = int(ctx.res["quad_res"])
    rel = [abs(relative_residual(ctx.phi, ctx.w, tf, q)[1]) for tf in bumps]
    return [CheckRecord("residual", max(rel), 0.0, ctx.tol("residual"), "<=",
                        {"bumps": len(rel), "quad_res": q})]


def check_broad_source(ctx):
    """Pointwise source on a lattice, then its integral along the curves."""
    w_hat, flags = broad_representative(ctx.phi, ctx.domain, tuple(ctx.res["broad_grid"]), ctx.opts)
    rep = check_broad(ctx.phi, w_hat, ctx.curves(), tol=ctx.tol("broad"), flags=flags)
    worst = max(rep.checks, key=lambda r: r.measured - r.bound)
    return [CheckRecord("broad", worst.measured, worst.bound, 0.0, "<=",
                        {"curves": len(rep.checks), "failed_curves": sum(not r.passed for r in rep.checks),
                         "multivalued_nodes": int(flags.multivalued.sum()),
                         "failed_nodes": int(flags.failed.sum())})]


def check_holder(ctx):
    """Vertical Hölder-1/2 ratio against ``2 sqrt(2 L)`` with L = sup |w|."""
    L = _sup_w(ctx)
    ratio, bound = holder_vertical_check(ctx.phi, ctx.domain, L, int(ctx.res["holder_pairs"]), ctx.cfg.seed)
    return [CheckRecord("holder", ratio, bound, ctx.tol("holder"), "<=", {"L": L})]


def check_param(ctx):
    """Full parameterisation: covering, parameter range, monotone sections."""
    p = ctx.param()
    tol = ctx.tol("param")
    return [
        CheckRecord("param.full", float(p.kind == FULL), 1.0, 0.0, "==", {"columns": p.chi.shape[1]}),
        CheckRecord("param.gap", p.max_gap, 2.0 * p.lattice_step, tol, "<="),
        CheckRecord("param.tau_min", float(p.tau[0]), 0.0, tol, ">="),
        CheckRecord("param.tau_max", float(p.tau[-1]), 2.0, tol, "<="),
        CheckRecord("param.monotone", float(p.monotonicity_violations()), 0.0, 0.0, "<="),
    ]


def check_mollify(ctx):
    """Mollified parameterisations: shrinking L1 gap, defining relation within 2h."""
    p = ctx.param()
    eps = sorted((float(e) for e in ctx.res["mollify_eps"]), reverse=True)
    gaps, rel = [], []
    for e in eps:
        q, phi_e, l1 = mollify_param(p, e)
        gaps.append(l1)
        rel.append(mollified_relation_error(q, phi_e))
    drops = [a - b for a, b in zip(gaps, gaps[1:])]
    out = [CheckRecord("mollify.relation", max(rel), 2.0 * p.h, ctx.tol("mollify"), "<=",
                       {"eps": eps, "errors": rel})]
    if drops:
        out.append(CheckRecord("mollify.l1_decrease", min(drops), 0.0, 0.0, ">",
                               {"eps": eps, "l1_gap": gaps}))
    return out


def check_extension(ctx):
    """Extension over dichotomous sections: growth per level within ``2^{1-2n}``."""
    r = ctx.res
    opts = FlowOptions(h=float(r["extension_h"]), eps0=ctx.opts.eps0, eps_levels=ctx.opts.eps_levels,
                       tol=ctx.opts.tol)
    p = build_minimal_param(ctx.phi, ctx.domain, int(r["extension_launches"]), opts, include_terminal=True)
    q = extend_param(p, int(r["extension_depth"]))
    out = []
    for n, g in sorted(q.trace.growth_by_level().items()):
        if n >= 1:
            out.append(CheckRecord(f"extension.growth[{n}]", g, 2.0 ** (1 - 2 * n), ctx.tol("extension"), "<="))
    out.append(CheckRecord("extension.monotone", float(q.monotonicity_violations()), 0.0, 0.0, "<="))
    return out


CHECKS = {
    "dafermos_bound": check_dafermos_bound,
    "dafermos_identity": check_dafermos_identity,
    "residual": check_residual,
    "broad": check_broad_source,
    "holder": check_holder,
    "param": check_param,
    "mollify": check_mollify,
    "extension": check_extension,
}
# extension is opt-in: it needs a minimal family and takes longer than the rest combined
DEFAULT_CHECKS = tuple(k for k in CHECKS if k != "extension")


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    report: VerificationReport
    artifacts: dict


def _resolve_fields(cfg: RunConfig):
    if cfg.instance:
        g = gallery(cfg.instance)
        return g.phi, g.w, g.domain, {"instance": g.name, "notes": g.notes}
    try:
        phi = ScalarField.from_csv(cfg.base_dir / cfg.fields["phi"])
        w = ScalarField.from_csv(cfg.base_dir / cfg.fields["w"])
    except FieldError as exc:
        raise ConfigError(str(exc)) from None
    if phi.domain != w.domain:
        raise ConfigError("phi and w lattices cover different domains")
    return phi, w, phi.domain, {"fields": dict(cfg.fields)}


def run(cfg: RunConfig, write: bool = True) -> RunResult:
    """Run the configured checks; with ``write`` also emit the artifacts.

    A check that raises is recorded as a failing entry carrying the error
    message.  Artifacts: report JSON, one ``s,gamma`` CSV per shared curve,
    the fan SVG and (when configured) the full parameterisation CSV.
    """
    phi, w, domain, source = _resolve_fields(cfg)
    opts = FlowOptions(h=float(cfg.resolution["h"]))
    ctx = _Context(cfg, phi, w, domain, opts)
    report = VerificationReport({"package": "charflow", "version": __version__, **source,
                                 "domain": domain.to_dict(), "config": cfg.to_dict()})
    for name in cfg.checks:
        try:
            records = CHECKS[name](ctx)
        except Exception as exc:  # noqa: BLE001 - recorded per check
            records = [CheckRecord(name, math.nan, 0.0, 0.0, "<=", {"error": f"{type(exc).__name__}: {exc}"})]
        for rec in records:
            report.add(rec)

    artifacts = {}
    if write:
        out = cfg.output
        root = Path(out["dir"])
        root.mkdir(parents=True, exist_ok=True)
        if out.get("curves") and ctx._curves:
            cdir = root / out["curves"]
            cdir.mkdir(parents=True, exist_ok=True)
            for k, c in enumerate(ctx._curves):
                c.to_csv(cdir / f"curve_{k:03d}.csv")
            artifacts["curves"] = str(cdir)
        if out.get("svg"):
            fan = fan_curves(phi, domain, int(cfg.resolution["fan_anchors"]), opts)
            path = root / out["svg"]
            emit_fan_svg(fan, domain, path)
            artifacts["svg"] = str(path)
        if out.get("param") and ctx._param is not None:
            path = root / out["param"]
            ctx._param.to_csv(path)
            artifacts["param"] = str(path)
        if out.get("report"):
            path = root / out["report"]
            path.write_text(report.to_json() + "\n")
            artifacts["report"] = str(path)
    return RunResult(report, artifacts)


# ---------------------------------------------------------------------------
# fans


def fan_curves(phi: ScalarField, domain: Domain, anchors: int, opts: FlowOptions = FlowOptions(),
               t_anchor: float = 0.0) -> list[Characteristic]:
    """Minimal and maximal forward curves from ``anchors`` points on the row ``t = t_anchor``.

    ``t_anchor`` is clamped into the domain.
    """
    if anchors < 1:
        return []
    t0 = min(max(t_anchor, domain.t_lo), domain.t_hi)
    s0 = np.linspace(domain.z_lo, domain.z_hi, anchors, endpoint=False)
    out = []
    for side in (Selection.MINIMAL, Selection.MAXIMAL):
        cs, _ = curves_many(phi, s0, np.full(anchors, t0), (s0, domain.z_hi), opts, side, side, side, check=False)
        out.extend(cs)
    return out


def _fmt(x: float) -> str:
    out = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if out == "-0" else out


def emit_fan_svg(curves, domain: Domain, path) -> int:
    """Write a standalone SVG: frame, axes through the origin, one polyline per curve.

    Coordinates are the domain's own (z to the right, t upward) and are
    printed with fixed precision, so equal input gives equal bytes.
    Returns the number of bytes written.
    """
    zl, zh, tl, th = domain.z_lo, domain.z_hi, domain.t_lo, domain.t_hi
    w, h = zh - zl, th - tl
    px = 640
    py = max(1, round(px * h / w))
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{py}" '
        f'viewBox="{_fmt(zl)} {_fmt(-th)} {_fmt(w)} {_fmt(h)}" preserveAspectRatio="none">',
        '<g fill="none" stroke-width="1" vector-effect="non-scaling-stroke">',
        f'<rect x="{_fmt(zl)}" y="{_fmt(-th)}" width="{_fmt(w)}" height="{_fmt(h)}" stroke="#000000" '
        'vector-effect="non-scaling-stroke"/>',
    ]
    if tl <= 0 <= th:
        parts.append(f'<line class="axis" x1="{_fmt(zl)}" y1="0" x2="{_fmt(zh)}" y2="0" stroke="#888888" '
                     'vector-effect="non-scaling-stroke"/>')
    if zl <= 0 <= zh:
        parts.append(f'<line class="axis" x1="0" y1="{_fmt(-th)}" x2="0" y2="{_fmt(-tl)}" stroke="#888888" '
                     'vector-effect="non-scaling-stroke"/>')
    colours = {Selection.MINIMAL: "#1f4e9c", Selection.MAXIMAL: "#b0341e"}
    for c in curves:
        pts = " ".join(f"{_fmt(s)},{_fmt(-g)}" for s, g in zip(c.s, c.gamma))
        colour = colours.get(c.selection, "#222222")
        parts.append(f'<polyline class="{c.selection.value}" points="{pts}" stroke="{colour}" '
                     'vector-effect="non-scaling-stroke"/>')
    parts += ["</g>", "</svg>", ""]
    data = "\n".join(parts).encode()
    Path(path).write_bytes(data)
    return len(data)
