"""Pathwise functionals of sample paths.

Estimators accept batched arrays (paths along axis 0, time along the last
axis) and return one value per path; 1-d input gives a scalar.

Local-time normalisation: ``L`` is the Tanaka local time, so that
``|X| = |X_0| + B^X + L(|X|)`` and, for a standard Brownian motion ``B``,
``L^0(B) = L(|B|)``.  Both occupation and crossing estimators are scaled to
this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError, ConsistencyError, PreconditionError
from .noise import DriverPath
from .sde_sim import CouplingRun, SamplePath
from .star_graph import RadialIndicator, TestFunction

Value = Union[float, np.ndarray]
# continuity correction for discretely monitored Brownian extrema: -zeta(1/2) / sqrt(2 pi)
BGK_BETA = 0.5826
METHODS = ("occupation", "downcrossing", "tanaka", "quadratic-variation")


@dataclass(frozen=True)
class LocalTimeEstimate:
    level: float
    epsilon: float
    value: Value
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown local-time method {self.method!r}")
        if np.any(np.asarray(self.value) < 0):
            raise ConsistencyError("local time estimate is negative")


@dataclass(frozen=True)
class ResidualReport:
    """Signed terms of an Itô-type identity; ``residual`` is their sum.

    Arrays have shape ``(n_paths, steps + 1)``; ``sup_abs_residual`` is the
    per-path supremum over the grid.
    """

    test_function: object
    residual: np.ndarray
    terms: dict = field(default_factory=dict)

    @property
    def sup_abs_residual(self) -> np.ndarray:
        return np.abs(self.residual).max(axis=-1)

    def term_magnitudes(self) -> dict:
        return {k: float(np.abs(v).max()) for k, v in self.terms.items()}


def _squeeze(x: np.ndarray, one_d: bool) -> Value:
    return float(x[0]) if one_d else x


def local_time_occupation(radial, dt: float, a: float, eps: float, rate: float = 1.0) -> LocalTimeEstimate:
    """``dt * #{k < K : |x_k - a| < eps} / (2 eps rate)``.

    ``rate`` is the quadratic-variation rate of the path near ``a``.  For a
    reflected path at ``a = 0`` the band is ``[0, eps)``, which is the
    occupation of ``(-eps, eps)`` by the unreflected path.
    """
    if eps <= 0 or dt <= 0 or rate <= 0:
        raise ConfigurationError("eps, dt and rate must be positive")
    x = np.asarray(radial, dtype=float)
    one_d = x.ndim == 1
    x = np.atleast_2d(x)[:, :-1]
    count = (np.abs(x - a) < eps).sum(axis=-1)
    return LocalTimeEstimate(a, eps, _squeeze(dt * count / (2 * eps * rate), one_d), "occupation")


def local_time_downcrossing(radial, a: float, eps: float, touched=None,
                            dt: Optional[float] = None) -> LocalTimeEstimate:
    """``eps`` times the number of downcrossings of ``[a, a + eps]`` plus
    upcrossings of ``[a - eps, a]``.

    ``touched`` optionally flags grid points known to have reached ``a``
    inside the preceding step (the zero-visit flags of a reflected path);
    it replaces the grid test for reaching ``a``.  With ``dt`` given, grid
    levels are shifted towards the path by ``BGK_BETA * sqrt(dt)``, the
    continuity correction for discretely monitored Brownian extrema;
    without it the grid misses level passages inside a step and the count
    is biased low when ``eps`` is comparable to ``sqrt(dt)``.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    x = np.atleast_2d(np.asarray(radial, dtype=float))
    one_d = np.asarray(radial).ndim == 1
    shift = 0.0 if dt is None else BGK_BETA * np.sqrt(dt)
    if touched is not None:
        at_a = (x <= a) | np.atleast_2d(np.asarray(touched, dtype=bool))
        at_a_from_below = x >= a
    else:
        at_a = x <= a + shift
        at_a_from_below = x >= a - shift
    count = _crossings(x >= a + eps - shift, at_a) + _crossings(x <= a - eps + shift, at_a_from_below)
    return LocalTimeEstimate(a, eps, _squeeze(eps * count, one_d), "downcrossing")


def _crossings(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Number of completed passages from a ``start`` point to a later ``end`` point."""
    P, K1 = start.shape
    armed = np.zeros(P, dtype=bool)
    count = np.zeros(P, dtype=np.int64)
    for k in range(K1):
        done = armed & end[:, k]
        count += done
        armed = (armed & ~done) | start[:, k]
    return count


def local_time_qv(series, eps: float, increments=None) -> LocalTimeEstimate:
    """One-sided band estimator ``sum_k 1{0 < s_k < eps} q_k / (2 eps)``.

    ``q_k`` is the squared increment of the martingale part of the series
    over step ``k`` when ``increments`` (shape ``(n_paths, steps)``) is
    given, and the squared increment of the series itself otherwise.  The
    weights adapt to the local quadratic-variation rate, so no rate has to
    be supplied.  Reflected increments near 0 are shorter than their
    martingale parts, so the self-weighted form is biased low when ``eps``
    is of order ``sqrt(dt)``.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    s = np.asarray(series, dtype=float)
    one_d = s.ndim == 1
    s = np.atleast_2d(s)
    q = np.diff(s, axis=-1) ** 2 if increments is None else np.atleast_2d(np.asarray(increments, float)) ** 2
    band = (s[:, :-1] > 0) & (s[:, :-1] < eps)
    val = (band * q).sum(axis=-1) / (2 * eps)
    return LocalTimeEstimate(0.0, eps, _squeeze(val, one_d), "quadratic-variation")


def distance_martingale_increments(run: CouplingRun) -> np.ndarray:
    """Per-step increments of the martingale part of ``D = d(X̄, Ȳ)``.

    On a shared step ray both spider radii move with the same driver
    coordinate, so the part is the scaled difference of the B-increments;
    otherwise the radii add and so do their increments.
    """
    x, y = run.x_path, run.y_path
    scale = run.graph.spider_scale()
    sx = x.bx_increments / scale[x.step_ray]
    sy = y.bx_increments / scale[y.step_ray]
    return np.where(x.step_ray == y.step_ray, sx - sy, sx + sy)


def local_time_of_distance(run: CouplingRun, eps: float) -> LocalTimeEstimate:
    """Local time at ``0+`` of ``D = d(X̄, Ȳ)``, per path, weighted by the
    quadratic variation of its martingale part."""
    return local_time_qv(run.distance(), eps, distance_martingale_increments(run))


def last_zero(path: SamplePath, t: float) -> np.ndarray:
    """Largest grid time ``<= t`` flagged as a zero-visit, per path."""
    k = path.index_of(t)
    idx = last_zero_index(path.zero_visit, k)
    return idx * path.dt


def last_zero_index(zero_visit: np.ndarray, k: int) -> np.ndarray:
    z = np.atleast_2d(zero_visit)[:, : k + 1]
    has = z.any(axis=1)
    if not has.all():
        raise ConsistencyError("path has no zero-visit before t; it must start at the origin")
    return k - np.argmax(z[:, ::-1], axis=1)


def quadratic_covariation(u, v) -> np.ndarray:
    """Running sum ``sum_{j <= k} u_j v_j`` along the last axis."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ConfigurationError(f"length mismatch: {u.shape} vs {v.shape}")
    return np.cumsum(u * v, axis=-1)


def _left_derivatives(path: SamplePath, f):
    """``f, f', f''`` with derivatives at left points on the step ray."""
    val, _, _ = f.evaluate(path.graph, path.ray, path.radius)
    left_ray = np.where(path.ray[:, :-1] == 0, 0, path.step_ray)
    _, d1, d2 = f.evaluate(path.graph, left_ray, path.radius[:, :-1])
    return val, d1, d2


def _running(x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], x.shape[1] + 1))
    np.cumsum(x, axis=1, out=out[:, 1:])
    return out


def interface_sde_residual(path: SamplePath, w: DriverPath, f: TestFunction) -> ResidualReport:
    """``f(X_t) - f(X_0) - sum f'(X) dW^{ray} - 1/2 sum f''(X) dt`` at grid times.

    ``f`` must satisfy the boundary condition ``sum_i p_i a_i = 0``: the
    identity has no local-time term.
    """
    if not f.in_class_d(path.graph):
        raise PreconditionError("interface SDE residual needs a test function with zero boundary slope")
    if w.steps != path.steps or w.dt != path.dt or w.n_paths != path.n_paths:
        raise ConfigurationError("driver does not match the path grid")
    val, d1, d2 = _left_derivatives(path, f)
    rows = np.arange(path.n_paths)[:, None]
    cols = np.arange(path.steps)[None, :]
    dw = w.increments[rows, cols, path.step_ray.astype(np.int64) - 1]
    terms = {
        "value": val - val[:, :1],
        "stochastic": -_running(d1 * dw),
        "drift": -0.5 * path.dt * _running(d2),
    }
    return ResidualReport(f, sum(terms.values()), terms)


def freidlin_sheu_residual(path: SamplePath, f) -> ResidualReport:
    """Residual of the Itô formula with the boundary term ``f'(0) L_t(|X|)``,
    ``f'(0) = sum_i p_i a_i``."""
    val, d1, d2 = _left_derivatives(path, f)
    terms = {
        "value": val - val[:, :1],
        "stochastic": -_running(d1 * path.bx_increments),
        "drift": -0.5 * path.dt * _running(d2),
        "local_time": -f.boundary_slope(path.graph) * (path.local_time - path.local_time[:, :1]),
    }
    return ResidualReport(f, sum(terms.values()), terms)


def spider_components(path: SamplePath) -> np.ndarray:
    """Array ``(N, n_paths, steps + 1)``: component ``i`` is ``|X̄|`` on ray ``i + 1`` and 0 elsewhere."""
    s = path.spider()
    rays = np.arange(1, path.graph.n_rays + 1)[:, None, None]
    return np.where(path.ray[None] == rays, s[None], 0.0)


def spider_component_gap(path: SamplePath) -> np.ndarray:
    """Per-ray residual of ``X̄^i = sum 1{E_i} dB^X / (N p_i) + L / N``; shape ``(N, n_paths, steps + 1)``."""
    return np.stack([freidlin_sheu_residual(path, RadialIndicator(i)).residual
                     for i in range(1, path.graph.n_rays + 1)])


def local_time_exclusion(run: CouplingRun, theta: float) -> tuple[float, float]:
    """Pooled fraction of the increase of ``L(|X|)`` during steps in which
    ``Y`` is within ``theta`` of the origin (or visits it), and the same
    with the roles swapped."""
    if theta < 0:
        raise ConfigurationError("theta must be nonnegative")

    def near(p: SamplePath) -> np.ndarray:
        close = (p.radius <= theta) | p.zero_visit
        return close[:, :-1] | close[:, 1:]

    def frac(a: SamplePath, b: SamplePath) -> float:
        dl = np.diff(a.local_time, axis=1)
        total = dl.sum()
        return float((dl * near(b)).sum() / total) if total > 0 else 0.0

    return frac(run.x_path, run.y_path), frac(run.y_path, run.x_path)


def balayage_process(run: CouplingRun, k: int) -> np.ndarray:
    """``D_t - (N-2)/N (1{X̄_{g^Y} != 0} |Ȳ_t| + 1{Ȳ_{g^X} != 0} |X̄_t|)`` at grid index ``k``."""
    x, y = run.x_path, run.y_path
    n = run.graph.n_rays
    rows = np.arange(x.n_paths)
    gx = last_zero_index(x.zero_visit, k)
    gy = last_zero_index(y.zero_visit, k)
    x_off = ~x.zero_visit[rows, gy] & (x.ray[rows, gy] != 0)
    y_off = ~y.zero_visit[rows, gx] & (y.ray[rows, gx] != 0)
    d = run.distance()[:, k]
    return d - (n - 2) / n * (x_off * y.spider()[:, k] + y_off * x.spider()[:, k])


def distance_martingale(run: CouplingRun) -> np.ndarray:
    """``D - (N-2)/N (|X̄| + |Ȳ|)`` at grid times."""
    n = run.graph.n_rays
    return run.distance() - (n - 2) / n * (run.x_path.spider() + run.y_path.spider())
