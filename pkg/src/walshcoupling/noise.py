"""Reproducible Brownian drivers.

Every random number is a pure function of ``(master_seed, stream_id, draw
index)``: streams are Philox counter-based generators keyed by the two
64-bit words, and Gaussians come from the inverse normal CDF of the raw
counter output.  Paths can therefore be generated in any order, in any
number of worker processes, with bit-identical results.

A driver stores, besides the Gaussian increments, one auxiliary standard
normal per step and coordinate.  It encodes the minimum of the Brownian
bridge inside the step (see :meth:`DriverPath.step_minima`), so that
"did the path touch zero during this step" is a function of the driver
and is shared by every solution that uses it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import log_ndtr, ndtri

from .errors import ConfigurationError

MASK64 = (1 << 64) - 1

# purpose tags for stream ids
DRIVER = 1
DRIVER_HAT = 2
RAYS_X = 3
RAYS_Y = 4
AUX = 5
SCALAR = 6
RAYS_EXACT = 7


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= MASK64:
                raise ConfigurationError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def child(self, index: int) -> "SeedSpec":
        """Derived stream, distinct for each ``index``."""
        return SeedSpec(self.master_seed, _splitmix64(self.stream_id ^ _splitmix64(index + 0x632BE59BD9B4E019)))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def stream_id(experiment: int, purpose: int, index: int) -> int:
    """Pack (experiment ordinal, purpose tag, path index) into one stream id."""
    if not (0 <= experiment < 256 and 0 <= purpose < 256 and 0 <= index < (1 << 48)):
        raise ConfigurationError("stream id component out of range")
    return (experiment << 56) | (purpose << 48) | index


def path_seeds(master_seed: int, experiment: int, purpose: int, indices: Iterable[int]) -> list[SeedSpec]:
    return [SeedSpec(master_seed, stream_id(experiment, purpose, int(i))) for i in indices]


Seeds = Union[SeedSpec, Sequence[SeedSpec]]


def _as_list(seed: Seeds) -> list[SeedSpec]:
    if isinstance(seed, SeedSpec):
        return [seed]
    seeds = list(seed)
    if not seeds or not all(isinstance(s, SeedSpec) for s in seeds):
        raise ConfigurationError("expected a SeedSpec or a non-empty sequence of SeedSpecs")
    return seeds


def uniforms(seed: SeedSpec, n: int) -> np.ndarray:
    """First ``n`` draws of the stream as doubles in the open interval (0, 1)."""
    bg = np.random.Philox(key=np.array([seed.master_seed, seed.stream_id], dtype=np.uint64))
    raw = bg.random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: SeedSpec, n: int) -> np.ndarray:
    return ndtri(uniforms(seed, n))


def uniforms_batch(seeds: Seeds, n: int) -> np.ndarray:
    """Array of shape ``(len(seeds), n)``."""
    seeds = _as_list(seeds)
    return np.stack([uniforms(s, n) for s in seeds])


@dataclass(frozen=True)
class DriverPath:
    """Increments of an N-dimensional Brownian motion on a uniform grid.

    ``increments`` and ``bridge`` have shape ``(n_paths, steps, n_rays)``.
    """

    dt: float
    increments: np.ndarray
    bridge: np.ndarray

    def __post_init__(self):
        if self.increments.ndim != 3 or self.increments.shape != self.bridge.shape:
            raise ConfigurationError("increments and bridge must share a (paths, steps, rays) shape")

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def steps(self) -> int:
        return self.increments.shape[1]

    @property
    def n_rays(self) -> int:
        return self.increments.shape[2]

    @property
    def t_max(self) -> float:
        return self.steps * self.dt

    def cumulative(self) -> np.ndarray:
        """``W`` at the grid times, shape ``(n_paths, steps + 1, n_rays)``, starting at 0."""
        w = np.zeros((self.n_paths, self.steps + 1, self.n_rays))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w

    def step_minima(self) -> np.ndarray:
        """Minimum of each coordinate over each step, relative to its value at the step start.

        Given the increment ``x`` the bridge minimum is ``(x - sqrt(x^2 - 2 dt log U)) / 2``
        with ``U`` uniform; here ``U = Phi(bridge)``.
        """
        x = self.increments
        return 0.5 * (x - np.sqrt(x * x - 2.0 * self.dt * log_ndtr(self.bridge)))

    def __getitem__(self, idx) -> "DriverPath":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return DriverPath(self.dt, self.increments[idx], self.bridge[idx])

    def repeat(self, n: int) -> "DriverPath":
        """View of a single-path driver replicated ``n`` times (no copy)."""
        if self.n_paths != 1:
            raise ConfigurationError("repeat needs a single-path driver")
        shape = (n,) + self.increments.shape[1:]
        return DriverPath(self.dt, np.broadcast_to(self.increments, shape), np.broadcast_to(self.bridge, shape))

    def same_grid(self, other: "DriverPath") -> bool:
        return self.dt == other.dt and self.increments.shape == other.increments.shape


def _check_grid(dt: float, steps: int) -> None:
    if not (dt > 0 and np.isfinite(dt)):
        raise ConfigurationError(f"dt must be positive, got {dt!r}")
    if int(steps) != steps or steps < 1:
        raise ConfigurationError(f"steps must be a positive integer, got {steps!r}")


def n_steps(t_max: float, dt: float) -> int:
    """Number of grid steps covering ``[0, t_max]``; ``t_max`` must be a multiple of ``dt``."""
    if not (t_max > 0 and dt > 0):
        raise ConfigurationError("t_max and dt must be positive")
    k = int(round(t_max / dt))
    if k < 1 or abs(k * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ConfigurationError(f"t_max={t_max} is not a multiple of dt={dt}")
    return k


def gen_driver(n_rays: int, dt: float, steps: int, seed: Seeds) -> DriverPath:
    """Driver increments for each seed (one path per seed).

    Within a stream, draws ``0 .. K*N-1`` are the increments in row-major
    ``(step, coordinate)`` order and the next ``K*N`` draws are the bridge
    variables.
    """
    _check_grid(dt, steps)
    if n_rays < 1:
        raise ConfigurationError("n_rays must be positive")
    seeds = _as_list(seed)
    m = steps * n_rays
    z = np.empty((len(seeds), 2 * m))
    for j, s in enumerate(seeds):
        z[j] = normals(s, 2 * m)
    inc = z[:, :m].reshape(len(seeds), steps, n_rays) * np.sqrt(dt)
    bridge = z[:, m:].reshape(len(seeds), steps, n_rays)
    return DriverPath(float(dt), inc, bridge)


def mix_drivers(w: DriverPath, w_hat: DriverPath, r: float, complement: bool = False) -> DriverPath:
    """``r W + sqrt(1 - r^2) W_hat``, or the independent complement
    ``sqrt(1 - r^2) W - r W_hat`` when ``complement`` is set.

    Bridge variables are mixed with the same coefficients, so the output is
    again a standard driver when the inputs are independent ones, and the
    endpoints ``r = 1`` / ``r = 0`` return the inputs exactly.
    """
    if not w.same_grid(w_hat):
        raise ConfigurationError("drivers must share dt and shape")
    if not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"r must lie in [0, 1], got {r!r}")
    s = np.sqrt(1.0 - r * r)
    a, b = (s, -r) if complement else (r, s)
    if b == 0.0:
        return DriverPath(w.dt, a * w.increments if a != 1.0 else w.increments, w.bridge if a == 1.0 else a * w.bridge)
    if a == 0.0:
        return DriverPath(w.dt, b * w_hat.increments if b != 1.0 else w_hat.increments,
                          w_hat.bridge if b == 1.0 else b * w_hat.bridge)
    return DriverPath(w.dt, a * w.increments + b * w_hat.increments, a * w.bridge + b * w_hat.bridge)


def concat_drivers(drivers: Sequence[DriverPath]) -> DriverPath:
    dt = drivers[0].dt
    if any(d.dt != dt for d in drivers):
        raise ConfigurationError("drivers must share dt")
    return DriverPath(dt, np.concatenate([d.increments for d in drivers], axis=2),
                      np.concatenate([d.bridge for d in drivers], axis=2))
