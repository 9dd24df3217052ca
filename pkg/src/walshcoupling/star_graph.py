"""Geometry of the metric star graph.

A point is either the origin or a pair ``(ray, radius)`` with ``ray`` in
``1..N`` and ``radius > 0``.  Array-valued helpers use the same encoding
with ray label ``0`` standing for the origin, which is how sample paths
are stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidPointError

PROB_TOL = 1e-12
# radii below this are treated as the origin
TINY_RADIUS = 1e-300


@dataclass(frozen=True)
class StarGraph:
    """Star graph with ``n_rays`` rays and excursion probabilities ``probs``."""

    n_rays: int
    probs: tuple = field(default=())

    def __post_init__(self):
        n = int(self.n_rays)
        probs = self.probs
        if probs is None or len(probs) == 0:
            probs = (1.0 / n,) * n if n > 0 else ()
        probs = tuple(float(p) for p in probs)
        object.__setattr__(self, "n_rays", n)
        object.__setattr__(self, "probs", probs)
        if n < 2:
            raise ConfigurationError(f"need at least 2 rays, got {n}")
        if len(probs) != n:
            raise ConfigurationError(f"expected {n} probabilities, got {len(probs)}")
        if any(not (0.0 < p < 1.0) for p in probs):
            raise ConfigurationError(f"probabilities must lie in (0, 1): {probs}")
        if abs(sum(probs) - 1.0) > PROB_TOL:
            raise ConfigurationError(f"probabilities must sum to 1, got {sum(probs)!r}")

    @classmethod
    def uniform(cls, n_rays: int) -> "StarGraph":
        return cls(n_rays, (1.0 / n_rays,) * n_rays)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @property
    def is_uniform(self) -> bool:
        return all(abs(q - 1.0 / self.n_rays) <= PROB_TOL for q in self.probs)

    def spider_scale(self) -> np.ndarray:
        """Radius divisors ``N p_i`` indexed by ray label (index 0 is the origin)."""
        return np.concatenate([[1.0], self.n_rays * self.p])


@dataclass(frozen=True)
class GraphPoint:
    """A point of the star graph; ``ray is None`` means the origin."""

    ray: Optional[int] = None
    radius: float = 0.0

    def __post_init__(self):
        if self.ray is None:
            if self.radius != 0.0:
                raise InvalidPointError("the origin carries no radius")
            return
        r = float(self.radius)
        if not np.isfinite(r) or r < 0:
            raise InvalidPointError(f"radius must be finite and positive, got {self.radius!r}")
        if r < TINY_RADIUS:
            object.__setattr__(self, "ray", None)
            object.__setattr__(self, "radius", 0.0)
            return
        if int(self.ray) < 1:
            raise InvalidPointError(f"ray labels start at 1, got {self.ray}")
        object.__setattr__(self, "ray", int(self.ray))
        object.__setattr__(self, "radius", r)

    @property
    def is_origin(self) -> bool:
        return self.ray is None

    def __repr__(self):
        if self.ray is None:
            return "Origin"
        return f"e{self.ray}({self.radius:g})"


ORIGIN = GraphPoint()


def point(ray: Optional[int], radius: float) -> GraphPoint:
    """Build ``e_ray(radius)``; a zero radius gives the origin."""
    if ray is None or radius == 0:
        return ORIGIN
    return GraphPoint(ray, radius)


def check_point(g: StarGraph, x: GraphPoint) -> None:
    if x.ray is not None and not 1 <= x.ray <= g.n_rays:
        raise InvalidPointError(f"ray {x.ray} out of range 1..{g.n_rays}")


def distance(g: StarGraph, x: GraphPoint, y: GraphPoint) -> float:
    """Geodesic distance: radii subtract on a shared ray and add otherwise."""
    check_point(g, x)
    check_point(g, y)
    if x.ray is not None and x.ray == y.ray:
        return abs(x.radius - y.radius)
    return x.radius + y.radius


def epsilon(x: GraphPoint) -> Optional[int]:
    """Ray label of ``x``, or ``None`` at the origin."""
    return x.ray


def spider_transform(g: StarGraph, x: GraphPoint) -> GraphPoint:
    """Map ``e_i(r)`` to ``e_i(r / (N p_i))``, fixing the origin."""
    check_point(g, x)
    if x.is_origin:
        return ORIGIN
    return GraphPoint(x.ray, x.radius / (g.n_rays * g.probs[x.ray - 1]))


def inverse_spider_transform(g: StarGraph, x: GraphPoint) -> GraphPoint:
    check_point(g, x)
    if x.is_origin:
        return ORIGIN
    return GraphPoint(x.ray, x.radius * g.n_rays * g.probs[x.ray - 1])


# -- array versions (ray label 0 = origin) ----------------------------------


def spider_radius(g: StarGraph, ray: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Radius of the spider-transformed point, elementwise."""
    scale = g.spider_scale()
    out = np.asarray(radius, dtype=float) / scale[np.asarray(ray)]
    return np.where(np.asarray(ray) == 0, 0.0, out)


def distance_arrays(ray_x, rad_x, ray_y, rad_y) -> np.ndarray:
    """Elementwise geodesic distance for label/radius arrays."""
    ray_x = np.asarray(ray_x)
    ray_y = np.asarray(ray_y)
    rad_x = np.where(ray_x == 0, 0.0, rad_x)
    rad_y = np.where(ray_y == 0, 0.0, rad_y)
    same = (ray_x == ray_y) & (ray_x != 0)
    return np.where(same, np.abs(rad_x - rad_y), rad_x + rad_y)


def spider_distance(g: StarGraph, ray_x, rad_x, ray_y, rad_y) -> np.ndarray:
    """``d(X̄, Ȳ)`` elementwise."""
    return distance_arrays(ray_x, spider_radius(g, ray_x, rad_x), ray_y, spider_radius(g, ray_y, rad_y))


# -- test functions ----------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """``f(e_i(r)) = a_i (1 - e^{-r}) + b_i (1 - e^{-r})^2``.

    ``a_i`` is the outward derivative at ``0+`` on ray ``i``; bounded first
    and second derivatives come for free from the basis.
    """

    __test__ = False  # not a pytest class

    a: tuple
    b: tuple

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if len(a) != len(b):
            raise ConfigurationError("a and b must have the same length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_rays(self) -> int:
        return len(self.a)

    def boundary_slope(self, g: StarGraph) -> float:
        """``f'(0) = sum_i p_i a_i``; zero exactly for members of class D."""
        return float(np.dot(g.p, self.a))

    def in_class_d(self, g: StarGraph, tol: float = PROB_TOL) -> bool:
        return abs(self.boundary_slope(g)) <= tol

    def origin_values(self, g: StarGraph) -> tuple[float, float, float]:
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        return 0.0, float(g.p @ a), float(g.p @ (2 * b - a))

    def evaluate(self, g: StarGraph, ray: np.ndarray, radius: np.ndarray):
        """Vectorised ``(f, f', f'')`` over label/radius arrays."""
        ray = np.asarray(ray)
        radius = np.asarray(radius, dtype=float)
        a = np.concatenate([[0.0], self.a])[ray]
        b = np.concatenate([[0.0], self.b])[ray]
        e = np.exp(-radius)
        u = 1.0 - e
        val = a * u + b * u * u
        d1 = (a + 2 * b * u) * e
        d2 = 2 * b * e * e - (a + 2 * b * u) * e
        at0 = ray == 0
        if np.any(at0):
            _, o1, o2 = self.origin_values(g)
            val = np.where(at0, 0.0, val)
            d1 = np.where(at0, o1, d1)
            d2 = np.where(at0, o2, d2)
        return val, d1, d2


def eval_test_function(g: StarGraph, f: TestFunction, x: GraphPoint) -> tuple[float, float, float]:
    """Closed-form ``(f(x), f'(x), f''(x))`` with the p-weighted origin convention."""
    check_point(g, x)
    if f.n_rays != g.n_rays:
        raise ConfigurationError("test function and graph disagree on N")
    ray = 0 if x.is_origin else x.ray
    v, d1, d2 = f.evaluate(g, np.array([ray]), np.array([x.radius]))
    return float(v[0]), float(d1[0]), float(d2[0])


def random_test_function(g: StarGraph, rng: np.random.Generator, class_d: bool = True,
                         scale: float = 1.0) -> TestFunction:
    """Draw coefficients from N(0, scale^2); optionally project ``a`` into class D."""
    a = rng.normal(0.0, scale, g.n_rays)
    b = rng.normal(0.0, scale, g.n_rays)
    if class_d:
        a = a - g.p @ a
    return TestFunction(tuple(a), tuple(b))


def radial_test_function(g: StarGraph, i: int) -> "RadialIndicator":
    """The function ``|x| / (N p_i)`` on ray ``i`` and zero elsewhere."""
    return RadialIndicator(i)


@dataclass(frozen=True)
class RadialIndicator:
    """Unbounded function ``f^i(x) = |x| 1{x in E_i} / (N p_i)`` used for the spider components."""

    ray: int

    def evaluate(self, g: StarGraph, ray: np.ndarray, radius: np.ndarray):
        ray = np.asarray(ray)
        c = 1.0 / (g.n_rays * g.probs[self.ray - 1])
        on = ray == self.ray
        val = np.where(on, c * np.asarray(radius, dtype=float), 0.0)
        d1 = np.where(on, c, 0.0)
        # origin convention: f'(0) = p_i * c = 1/N
        d1 = np.where(ray == 0, 1.0 / g.n_rays, d1)
        return val, d1, np.zeros_like(val)

    def boundary_slope(self, g: StarGraph) -> float:
        return 1.0 / g.n_rays

    def in_class_d(self, g: StarGraph, tol: float = PROB_TOL) -> bool:
        return False


def as_points(ray: Sequence[int], radius: Sequence[float]) -> list[GraphPoint]:
    return [point(int(i) if i else None, float(r) if i else 0.0) for i, r in zip(ray, radius)]
