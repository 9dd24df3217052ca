"""Monte Carlo aggregation and hypothesis tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats as sps

from .errors import ConfigurationError, InsufficientDataError

Z95 = float(sps.norm.ppf(0.975))


@dataclass(frozen=True)
class EstimateReport:
    name: str
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0 or not self.ci_low <= self.estimate <= self.ci_high:
            raise ConfigurationError("inconsistent estimate report")

    def within(self, target: float, k_se: float = 3.0, allowance: float = 0.0) -> bool:
        return abs(self.estimate - target) <= k_se * self.stderr + allowance


@dataclass(frozen=True)
class TestOutcome:
    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    dof: Optional[int] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        p = float(np.clip(self.p_value, 0.0, 1.0))
        object.__setattr__(self, "p_value", p)

    @property
    def reject_at_5pct(self) -> bool:
        return self.p_value < 0.05

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


def mc_mean(samples, name: str = "mean", params: Optional[dict] = None) -> EstimateReport:
    """Sample mean with standard error ``sd / sqrt(n)`` and a normal 95% interval."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    m = float(x.mean())
    se = float(x.std(ddof=1) / np.sqrt(n))
    return EstimateReport(name, m, se, m - Z95 * se, m + Z95 * se, n, dict(params or {}))


def binomial_se(p: float, n: int) -> float:
    return float(np.sqrt(max(p * (1 - p), 0.0) / n))


def bonferroni(p_values: Sequence[float]) -> float:
    """Family-wise p-value ``min(1, m * min p)``."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        raise ConfigurationError("no p-values to combine")
    return float(min(1.0, p.size * p.min()))


def contingency_table(x, y, n_rays: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.shape != y.shape:
        raise ConfigurationError("label sequences differ in length")
    for lab in (x, y):
        if lab.size and (lab.min() < 1 or lab.max() > n_rays):
            raise ConfigurationError(f"labels must lie in 1..{n_rays}")
    table = np.zeros((n_rays, n_rays), dtype=np.int64)
    np.add.at(table, (x - 1, y - 1), 1)
    return table


def chi_square_independence(labels, n_rays: int, y_labels=None) -> TestOutcome:
    """Pearson chi-square test of independence on the ``N x N`` table.

    ``labels`` is an ``(n, 2)`` array of pairs, or the first coordinate when
    ``y_labels`` is given.
    """
    lab = np.asarray(labels)
    if y_labels is None:
        if lab.ndim != 2 or lab.shape[1] != 2:
            raise ConfigurationError("labels must be an (n, 2) array of pairs")
        x, y = lab[:, 0], lab[:, 1]
    else:
        x, y = lab, np.asarray(y_labels)
    table = contingency_table(x, y, n_rays)
    n = int(table.sum())
    if n < 5 * n_rays**2:
        raise InsufficientDataError(f"need at least {5 * n_rays ** 2} pairs, got {n}")
    if (table.sum(0) == 0).any() or (table.sum(1) == 0).any():
        raise InsufficientDataError("a label never occurs; the table has an empty margin")
    res = sps.chi2_contingency(table, correction=False)
    return TestOutcome(float(res.statistic), float(res.pvalue), int(res.dof), {"table": table})


def chi_square_rect(x, y) -> TestOutcome:
    """Pearson independence test for arbitrary small label sets."""
    xs, xi = np.unique(np.asarray(x), return_inverse=True)
    ys, yi = np.unique(np.asarray(y), return_inverse=True)
    if len(xs) < 2 or len(ys) < 2:
        # a constant coordinate is trivially independent of the other
        return TestOutcome(0.0, 1.0, 0)
    table = np.zeros((len(xs), len(ys)), dtype=np.int64)
    np.add.at(table, (xi, yi), 1)
    res = sps.chi2_contingency(table, correction=False)
    return TestOutcome(float(res.statistic), float(res.pvalue), int(res.dof), {"table": table})


def martingale_test(m_t1, m_t2, history_features: Mapping[str, np.ndarray]) -> TestOutcome:
    """Test ``E[(M_t2 - M_t1) phi] = 0`` for each history feature ``phi``.

    Each feature gives a two-sided z-test through :func:`mc_mean`; the
    reported p-value is the Bonferroni combination and the statistic is the
    largest ``|z|``.
    """
    if not history_features:
        raise ConfigurationError("feature dictionary is empty")
    dm = np.asarray(m_t2, dtype=float) - np.asarray(m_t1, dtype=float)
    zs, ps = {}, []
    for name, phi in history_features.items():
        phi = np.broadcast_to(np.asarray(phi, dtype=float), dm.shape)
        rep = mc_mean(dm * phi, name)
        if rep.stderr > 0:
            z = rep.estimate / rep.stderr
        else:
            z = 0.0 if rep.estimate == 0 else np.inf
        zs[name] = float(z)
        ps.append(float(2 * sps.norm.sf(abs(z))))
    stat = max(abs(z) for z in zs.values())
    return TestOutcome(stat, bonferroni(ps), len(zs), {"z": zs, "p": dict(zip(zs, ps))})


def ks_test(samples, cdf: Callable, support=None) -> TestOutcome:
    """One-sample Kolmogorov-Smirnov test.

    With ``support`` (the grid on which the samples live) the supremum is
    taken over support points only, which is the KS distance between the
    empirical law and the law ``cdf`` induces on that grid; the
    continuous-case p-value is then conservative.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise InsufficientDataError(f"need at least 100 samples, got {n}")
    if support is None:
        res = sps.kstest(x, cdf)
        return TestOutcome(float(res.statistic), float(res.pvalue))
    s = np.unique(np.asarray(support, dtype=float))
    emp = np.searchsorted(np.sort(x), s, side="right") / n
    d = float(np.abs(emp - cdf(s)).max())
    return TestOutcome(d, float(sps.kstwo.sf(d, n)))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    return float(sps.kstwo.isf(alpha, n))


@dataclass(frozen=True)
class VanishingReport:
    scales: tuple
    estimates: tuple
    stderrs: tuple
    exponent: float
    monotone: bool
    extremes_separated: bool

    @property
    def passed(self) -> bool:
        return self.monotone and self.extremes_separated and self.exponent > 0


EstimateLike = Union[EstimateReport, tuple]


def vanishing_scan(estimates: Mapping[float, EstimateLike], geometric_tol: float = 1e-6) -> VanishingReport:
    """Check that ``P(event at scale delta)`` shrinks with ``delta``.

    Values are :class:`EstimateReport` or ``(estimate, stderr)``.  Reports
    strict monotonicity of the point estimates, separation of the 95%
    intervals at the two extreme scales, and the least-squares slope of
    ``log P`` against ``log delta``.
    """
    if len(estimates) < 3:
        raise ConfigurationError("need at least 3 scales")
    scales = np.array(sorted(estimates, reverse=True), dtype=float)
    if np.any(scales <= 0):
        raise ConfigurationError("scales must be positive")
    ratios = scales[1:] / scales[:-1]
    if np.ptp(ratios) > geometric_tol * ratios.mean():
        raise ConfigurationError("scales must form a geometric progression")
    est, se = [], []
    for d in scales:
        v = estimates[d]
        e, s = (v.estimate, v.stderr) if isinstance(v, EstimateReport) else (float(v[0]), float(v[1]))
        est.append(e)
        se.append(s)
    est = np.array(est)
    se = np.array(se)
    monotone = bool(np.all(np.diff(est) < 0))
    separated = bool(est[-1] + Z95 * se[-1] < est[0] - Z95 * se[0])
    if np.all(est > 0):
        exponent = float(np.polyfit(np.log(scales), np.log(est), 1)[0])
    else:
        exponent = float("nan")
    return VanishingReport(tuple(scales), tuple(est), tuple(se), exponent, monotone, separated)


def fit_sqrt_allowance(dts: Sequence[float], means: Sequence[float], weights=None) -> tuple[float, float]:
    """Least-squares fit ``mean(dt) = m0 + C sqrt(dt)``; returns ``(m0, C)``.

    Used to size the discretisation allowance ``|C| sqrt(dt)`` from a pilot
    on coarser meshes.
    """
    dts = np.asarray(dts, dtype=float)
    y = np.asarray(means, dtype=float)
    if dts.size < 2 or dts.shape != y.shape:
        raise ConfigurationError("need at least two (dt, mean) pairs")
    a = np.column_stack([np.ones_like(dts), np.sqrt(dts)])
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=float))
        a, y = a * w[:, None], y * w
    (m0, c), *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(m0), float(c)


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
