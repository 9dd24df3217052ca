"""Path simulation on the star graph.

All simulators are batched: they take one seed per path (or a driver with a
leading path axis) and return a :class:`SamplePath` whose arrays have shape
``(n_paths, steps + 1)`` for grid-time quantities and ``(n_paths, steps)``
for per-step quantities.  Ray label 0 means the origin.

Two Euler schemes are available for the interface SDE:

``"bridge"`` (default)
    Uses the bridge minimum stored with the driver to decide whether the
    driving coordinate reaches zero inside the step.  The radius is always
    ``|rho + dW^i|`` so the radial part is an exact reflected walk.  On a hit
    the new ray is drawn from a table that depends on whether the increment
    crossed zero; the tables are chosen so that, given a hit, the outgoing
    label has law ``p`` whatever the end radius.

``"threshold"``
    A grid point with radius at most ``theta`` (default ``sqrt(dt)``), or one
    reached by a crossing, is a zero-visit; at a zero-visit a fresh ray is
    drawn from ``p`` and the step follows that coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import noise
from .errors import ConfigurationError
from .noise import DriverPath, SeedSpec, Seeds
from .star_graph import ORIGIN, GraphPoint, StarGraph, check_point, spider_radius

SCHEMES = ("bridge", "threshold")


@dataclass(frozen=True)
class SamplePath:
    """A batch of paths on a uniform grid.

    ``step_ray[:, k]`` is the ray whose driver coordinate moved the path
    during step ``k`` (the freshly drawn ray when the step starts at a
    zero-visit); ``bx_increments[:, k]`` is the matching driver increment.
    ``zero_visit[:, k]`` flags grid point ``k`` as a visit to the origin:
    for the bridge scheme and the exact sampler it means the origin was hit
    during step ``k - 1``.
    """

    graph: StarGraph
    dt: float
    ray: np.ndarray
    radius: np.ndarray
    zero_visit: np.ndarray
    step_ray: np.ndarray
    bx_increments: np.ndarray
    local_time: np.ndarray
    bx_bridge: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.radius.shape[0]

    @property
    def steps(self) -> int:
        return self.radius.shape[1] - 1

    @property
    def t_max(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t`` (must be a grid time within the horizon)."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.steps or abs(k * self.dt - t) > 1e-9 * max(1.0, t):
            raise ConfigurationError(f"t={t} is not a grid time in [0, {self.t_max}]")
        return k

    def point(self, path: int, k: int) -> GraphPoint:
        ray = int(self.ray[path, k])
        return ORIGIN if ray == 0 else GraphPoint(ray, float(self.radius[path, k]))

    def spider(self) -> np.ndarray:
        """Radius of the spider-transformed path, ``|X̄|``."""
        return spider_radius(self.graph, self.ray, self.radius)

    def bx(self) -> np.ndarray:
        """``B^X`` at grid times."""
        out = np.zeros_like(self.radius)
        np.cumsum(self.bx_increments, axis=1, out=out[:, 1:])
        return out

    def tanaka_gap(self) -> np.ndarray:
        """``|X_t| - |X_0| - B^X_t - (L_t - L_0)``; zero up to rounding."""
        return self.radius - self.radius[:, :1] - self.bx() - (self.local_time - self.local_time[:, :1])

    def __getitem__(self, idx) -> "SamplePath":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return SamplePath(self.graph, self.dt, self.ray[idx], self.radius[idx], self.zero_visit[idx],
                          self.step_ray[idx], self.bx_increments[idx], self.local_time[idx],
                          None if self.bx_bridge is None else self.bx_bridge[idx])


@dataclass(frozen=True)
class CouplingRun:
    """Two solutions on a shared driver.  With ``r`` set, ``x`` was driven by
    ``mix_drivers(w, w_hat, r)`` and ``y`` by ``w``."""

    x_path: SamplePath
    y_path: SamplePath
    w: DriverPath
    w_hat: Optional[DriverPath] = None
    r: Optional[float] = None

    def __post_init__(self):
        if not (self.x_path.dt == self.y_path.dt == self.w.dt
                and self.x_path.steps == self.y_path.steps == self.w.steps):
            raise ConfigurationError("coupled paths and driver must share the grid")

    @property
    def graph(self) -> StarGraph:
        return self.x_path.graph

    def distance(self) -> np.ndarray:
        """``d(X̄_t, Ȳ_t)`` at grid times."""
        x, y = self.x_path, self.y_path
        xs, ys = x.spider(), y.spider()
        same = (x.ray == y.ray) & (x.ray != 0)
        return np.where(same, np.abs(xs - ys), xs + ys)

    def raw_distance(self) -> np.ndarray:
        """``d(X_t, Y_t)`` without the spider rescaling."""
        x, y = self.x_path, self.y_path
        rx = np.where(x.ray == 0, 0.0, x.radius)
        ry = np.where(y.ray == 0, 0.0, y.radius)
        same = (x.ray == y.ray) & (x.ray != 0)
        return np.where(same, np.abs(rx - ry), rx + ry)


def _start(g: StarGraph, x0: GraphPoint) -> tuple[int, float]:
    check_point(g, x0)
    return (0, 0.0) if x0.is_origin else (x0.ray, x0.radius)


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of 0-based labels from rows of cumulative probabilities."""
    j = (u[..., None] >= cum).sum(axis=-1)
    return np.minimum(j, cum.shape[-1] - 1)


def hit_tables(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative ray-transition tables for a hit without / with a crossing.

    Row ``i`` is the law of the next ray for a step that starts on ray ``i``.
    Averaging the two rows with weight 1/2 each gives ``p``, which is the
    conditional law of a crossing given a hit and the end radius.
    """
    n = len(p)
    stay = np.zeros((n, n))
    cross = np.zeros((n, n))
    for i in range(n):
        if p[i] <= 0.5:
            stay[i] = (1 - 2 * p[i]) * p / (1 - p[i])
            stay[i, i] = 2 * p[i]
            cross[i] = p / (1 - p[i])
            cross[i, i] = 0.0
        else:
            stay[i, i] = 1.0
            cross[i] = 2 * p
            cross[i, i] = 2 * p[i] - 1
    return np.cumsum(stay, axis=1), np.cumsum(cross, axis=1)


def simulate_wbm_exact(g: StarGraph, t_max: float, dt: float, seed: Seeds,
                       x0: GraphPoint = ORIGIN) -> SamplePath:
    """Walsh Brownian motion sampled exactly at grid times.

    The radial part is ``rho_0 + B - min(0, inf_{s<=t}(rho_0 + B_s))`` from a
    scalar driver ``B``, where the running infimum includes the bridge
    minimum of every step, so the grid marginals are exact.  Each step in
    which a new running minimum below zero is reached contains a visit to
    the origin; the label carried out of such a step is a fresh draw from
    ``p`` (later excursions inside the same step only matter through the
    last one, whose label is again a fresh draw).

    Each seed drives one path; the driver uses the seed's stream and the
    labels use ``seed.child(0)``.
    """
    steps = noise.n_steps(t_max, dt)
    seeds = noise._as_list(seed)
    ray0, rho0 = _start(g, x0)
    b = noise.gen_driver(1, dt, steps, seeds)
    u = noise.uniforms_batch([s.child(0) for s in seeds], steps)
    P = len(seeds)

    inc = b.increments[:, :, 0]
    s = np.zeros((P, steps + 1))
    np.cumsum(inc, axis=1, out=s[:, 1:])
    s += rho0
    low = s[:, :-1] + b.step_minima()[:, :, 0]
    running = np.minimum(0.0, np.minimum.accumulate(low, axis=1))
    prev = np.concatenate([np.zeros((P, 1)), running[:, :-1]], axis=1)
    hit = low < prev
    if ray0 == 0:
        hit[:, 0] = True

    local = np.zeros((P, steps + 1))
    local[:, 1:] = -running
    radius = s + local
    radius[:, 1:] = np.maximum(radius[:, 1:], 0.0)

    labels = _draw(np.cumsum(g.p), u) + 1
    # forward-fill the label of the most recent hit step
    last_hit = np.where(hit, np.arange(steps), -1)
    np.maximum.accumulate(last_hit, axis=1, out=last_hit)
    rows = np.arange(P)[:, None]
    ray = np.empty((P, steps + 1), dtype=np.int8)
    ray[:, 0] = ray0
    ray[:, 1:] = np.where(last_hit >= 0, labels[rows, np.maximum(last_hit, 0)], ray0)
    ray[radius == 0.0] = 0

    zero = np.zeros((P, steps + 1), dtype=bool)
    zero[:, 0] = ray0 == 0
    zero[:, 1:] = hit
    step_ray = np.where(ray[:, :-1] == 0, ray[:, 1:], ray[:, :-1]).astype(np.int8)
    return SamplePath(g, float(dt), ray, radius, zero, step_ray, inc.copy(), local,
                      b.bridge[:, :, 0].copy())


def simulate_interface_euler(g: StarGraph, w: DriverPath, seed_rays: Seeds,
                             x0: GraphPoint = ORIGIN, scheme: str = "bridge",
                             theta: Optional[float] = None) -> SamplePath:
    """Euler scheme for the interface SDE driven by ``w`` (one seed per path).

    The only randomness beyond ``w`` is the ray choice at the origin, read
    from ``seed_rays``: draw ``0`` is used when starting at the origin and
    draw ``k + 1`` at step ``k``.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if w.n_rays != g.n_rays:
        raise ConfigurationError("driver dimension must equal the number of rays")
    seeds = noise._as_list(seed_rays)
    P, K, N = w.n_paths, w.steps, g.n_rays
    if len(seeds) != P:
        raise ConfigurationError(f"need one ray seed per path ({P}), got {len(seeds)}")
    ray0, rho0 = _start(g, x0)
    u = noise.uniforms_batch(seeds, K + 1)
    cum_p = np.cumsum(g.p)

    ray = np.empty((P, K + 1), dtype=np.int8)
    radius = np.empty((P, K + 1))
    zero = np.zeros((P, K + 1), dtype=bool)
    step_ray = np.empty((P, K), dtype=np.int8)
    bx = np.empty((P, K))
    local = np.zeros((P, K + 1))
    ray[:, 0] = ray0
    radius[:, 0] = rho0
    zero[:, 0] = ray0 == 0

    rows = np.arange(P)
    cur = np.full(P, ray0 - 1 if ray0 else -1, dtype=np.int64)  # 0-based, -1 = origin
    rho = np.full(P, rho0)
    lt = np.zeros(P)
    if ray0 == 0:
        cur = _draw(cum_p, u[:, 0])

    if scheme == "bridge":
        minima = w.step_minima()
        stay_t, cross_t = hit_tables(g.p)
        for k in range(K):
            dw = w.increments[rows, k, cur]
            z = rho + dw
            hit = rho + minima[rows, k, cur] <= 0.0
            step_ray[:, k] = cur + 1
            bx[:, k] = dw
            rho = np.abs(z)
            lt = lt + (rho - z)
            if hit.any():
                idx = np.nonzero(hit)[0]
                tab = np.where((z[idx] <= 0.0)[:, None], cross_t[cur[idx]], stay_t[cur[idx]])
                cur = cur.copy()
                cur[idx] = _draw(tab, u[idx, k + 1])
            zero[:, k + 1] = hit
            radius[:, k + 1] = rho
            local[:, k + 1] = lt
            ray[:, k + 1] = cur + 1
    else:
        th = np.sqrt(w.dt) if theta is None else float(theta)
        if th < 0:
            raise ConfigurationError("theta must be nonnegative")
        at_zero = zero[:, 0] | (rho <= th)
        zero[:, 0] = at_zero
        for k in range(K):
            if k > 0 and at_zero.any():
                idx = np.nonzero(at_zero)[0]
                cur = cur.copy()
                cur[idx] = _draw(cum_p, u[idx, k])
            dw = w.increments[rows, k, cur]
            z = rho + dw
            step_ray[:, k] = cur + 1
            bx[:, k] = dw
            rho = np.abs(z)
            lt = lt + (rho - z)
            at_zero = (z <= 0.0) | (rho <= th)
            zero[:, k + 1] = at_zero
            radius[:, k + 1] = rho
            local[:, k + 1] = lt
            ray[:, k + 1] = cur + 1

    ray[radius == 0.0] = 0
    return SamplePath(g, float(w.dt), ray, radius, zero, step_ray, bx, local)


def _distinct(seeds_x: Seeds, seeds_y: Seeds) -> tuple[list[SeedSpec], list[SeedSpec]]:
    sx, sy = noise._as_list(seeds_x), noise._as_list(seeds_y)
    if set(sx) & set(sy):
        raise ConfigurationError("the two legs of a coupling need distinct ray seeds")
    return sx, sy


def simulate_wiener_coupling(g: StarGraph, w: DriverPath, seeds_x: Seeds, seeds_y: Seeds,
                             scheme: str = "bridge", theta: Optional[float] = None) -> CouplingRun:
    """Two solutions on the same driver with independent ray choices, so that
    ``X`` and ``Y`` are independent given ``W`` for every mesh."""
    sx, sy = _distinct(seeds_x, seeds_y)
    x = simulate_interface_euler(g, w, sx, scheme=scheme, theta=theta)
    y = simulate_interface_euler(g, w, sy, scheme=scheme, theta=theta)
    return CouplingRun(x, y, w)


def simulate_r_coupling(g: StarGraph, w: DriverPath, w_hat: DriverPath, r: float,
                        seeds_x: Seeds, seeds_y: Seeds, scheme: str = "bridge",
                        theta: Optional[float] = None) -> CouplingRun:
    """``X`` driven by ``r W + sqrt(1 - r^2) W_hat``, ``Y`` driven by ``W``."""
    sx, sy = _distinct(seeds_x, seeds_y)
    wr = noise.mix_drivers(w, w_hat, r)
    x = simulate_interface_euler(g, wr, sx, scheme=scheme, theta=theta)
    y = simulate_interface_euler(g, w, sy, scheme=scheme, theta=theta)
    return CouplingRun(x, y, w, w_hat, float(r))


def simulate_conditional_ensemble(g: StarGraph, w: DriverPath, n: int, seeds: Seeds,
                                  scheme: str = "bridge", theta: Optional[float] = None) -> SamplePath:
    """``n`` solutions sharing the single-path driver ``w``.

    ``seeds`` is either ``n`` distinct seeds or one seed whose children
    ``0..n-1`` are used.
    """
    if n < 1:
        raise ConfigurationError("ensemble size must be at least 1")
    if isinstance(seeds, SeedSpec):
        seeds = [seeds.child(i) for i in range(n)]
    seeds = list(seeds)
    if len(seeds) != n or len(set(seeds)) != n:
        raise ConfigurationError("need n pairwise distinct seeds")
    return simulate_interface_euler(g, w.repeat(n), seeds, scheme=scheme, theta=theta)


def construct_driver_from_solution(g: StarGraph, x: SamplePath, r: float,
                                   seeds: Seeds) -> tuple[DriverPath, DriverPath]:
    """Build ``(W, W_hat)`` such that ``mix_drivers(W, W_hat, r)`` drives ``x``.

    ``Gamma^i`` follows ``B^X`` while ``x`` is on ray ``i`` and a fresh
    Brownian motion ``V^i`` otherwise; then
    ``W = r Gamma + sqrt(1 - r^2) V'`` and ``W_hat = sqrt(1 - r^2) Gamma - r V'``
    with ``V'`` another fresh N-dimensional motion.  One seed per path.
    """
    if not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"r must lie in [0, 1], got {r!r}")
    sd = noise._as_list(seeds)
    if len(sd) != x.n_paths:
        raise ConfigurationError("need one seed per path")
    N = g.n_rays
    v = noise.gen_driver(2 * N, x.dt, x.steps, sd)
    if v.steps != x.steps:
        raise ConfigurationError("grid mismatch")
    on = x.step_ray[:, :, None] == np.arange(1, N + 1)[None, None, :]
    bx_bridge = x.bx_bridge if x.bx_bridge is not None else np.zeros_like(x.bx_increments)
    # an off-ray bridge variable for B^X is unknown for Euler paths; zero is a placeholder
    gam = np.where(on, x.bx_increments[:, :, None], v.increments[:, :, :N])
    gam_b = np.where(on, bx_bridge[:, :, None], v.bridge[:, :, :N])
    gamma = DriverPath(x.dt, gam, gam_b)
    aux = DriverPath(x.dt, v.increments[:, :, N:], v.bridge[:, :, N:])
    return noise.mix_drivers(gamma, aux, r), noise.mix_drivers(gamma, aux, r, complement=True)
