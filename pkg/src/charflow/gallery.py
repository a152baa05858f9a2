"""Named instances with closed-form data."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import Domain, ScalarField

BLOCK_LEVELS = 12


class UnknownInstance(KeyError):
    def __init__(self, name):
        super().__init__(f"unknown instance {name!r}; valid names: {', '.join(NAMES)}")
        self.name = name

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class GalleryInstance:
    name: str
    phi: ScalarField
    w: ScalarField
    domain: Domain
    notes: str
    w_hat_expected: ScalarField | None = None
    nodes: tuple = field(default=())

    def summary(self) -> dict:
        d = {
            "name": self.name,
            "phi": self.phi.describe(),
            "w": self.w.describe(),
            "domain": self.domain.to_dict(),
            "notes": self.notes,
        }
        if self.w_hat_expected is not None:
            d["w_hat_expected"] = self.w_hat_expected.describe()
        if self.nodes:
            d["nodes"] = list(self.nodes[:8])
        return d


def level_gap(i: int) -> float:
    """Length ``z_{i-1} - z_i = 2^-i / ln(i + 2)`` of level band i."""
    return 2.0 ** (-i) / math.log(i + 2.0)


def block_nodes(levels: int = BLOCK_LEVELS) -> np.ndarray:
    """Main nodes ``z_0 = 0 > z_1 > ... > z_levels``."""
    return -np.concatenate([[0.0], np.cumsum([level_gap(i) for i in range(1, levels + 1)])])


def sub_nodes(i: int) -> np.ndarray:
    """``z_{h,i} = z_{i-1} - h 2^{-2i} / ln(i + 2)`` for h = 0..2^i."""
    top = block_nodes(i)[i - 1]
    h = np.arange(2 ** i + 1)
    return top - h * 2.0 ** (-2 * i) / math.log(i + 2.0)


def accumulation_point(terms: int = 200) -> float:
    """Limit of the main nodes."""
    return -math.fsum(level_gap(j) for j in range(1, terms + 1))


def block_peak(i: int) -> float:
    """Sup of phi on level i: ``2^{1-i} / ln(i + 2)``."""
    return 2.0 ** (1 - i) / math.log(i + 2.0)


def _ex1():
    d = Domain(0.0, 1.0, -1.0, 1.0)
    return GalleryInstance(
        "ex1",
        ScalarField.analytic("sqrt(abs(t))", d, bound=1.0),
        ScalarField.analytic("step(t) - 1/2", d, bound=0.5),
        d,
        "phi = sqrt|t|, w = sgn(t)/2; zero curve and parabolas t = (s - c)^2/4 through the axis",
        ScalarField.analytic("sign(t)/2", d, bound=0.5),
    )


def _ex2_collapse():
    d = Domain(0.0, 1.0, -1.0, 1.0)
    return GalleryInstance(
        "ex2_collapse",
        ScalarField.analytic("-sign(t)*sqrt(abs(t))", d, bound=1.0),
        ScalarField.analytic("step(t) - 1/2", d, bound=0.5),
        d,
        "phi = -sgn(t) sqrt|t|; characteristics from both sides collapse onto the axis",
        ScalarField.analytic("sign(t)/2", d, bound=0.5),
    )


def _ex2_split():
    d = Domain(0.0, 1.0, -1.0, 1.0)
    return GalleryInstance(
        "ex2_split",
        ScalarField.analytic("sign(t)*sqrt(abs(t))", d, bound=1.0),
        ScalarField.analytic("sign(t)/2", d, bound=0.5),
        d,
        "phi = sgn(t) sqrt|t|; characteristics split off the axis as t = +-(s - c)^2/4",
    )


def _appendix():
    nodes = block_nodes()
    d = Domain(0.0, 1.0, accumulation_point(), 0.0)
    return GalleryInstance(
        "appendixA2",
        ScalarField.blocks(nodes, d, bound=block_peak(1)),
        ScalarField.blocks(nodes, d, derivative=True, bound=2 * math.pi / math.log(3.0)),
        d,
        "phi depends on t only; level i holds 2^i blocks of height 2^{-2i}/ln(i+2) swept by "
        "rescaled copies of s + sin(2 pi s - pi)/(2 pi) in time 2^-i; blocks kept to level "
        f"{BLOCK_LEVELS}, phi = 0 below",
        None,
        tuple(float(z) for z in nodes),
    )


_BUILDERS = {"ex1": _ex1, "ex2_collapse": _ex2_collapse, "ex2_split": _ex2_split, "appendixA2": _appendix}
NAMES = tuple(_BUILDERS)
_CACHE: dict[str, GalleryInstance] = {}


def gallery(name: str) -> GalleryInstance:
    """Return a named instance: ex1, ex2_collapse, ex2_split or appendixA2."""
    if name not in _BUILDERS:
        raise UnknownInstance(name)
    if name not in _CACHE:
        _CACHE[name] = _BUILDERS[name]()
    return _CACHE[name]
