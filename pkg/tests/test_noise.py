import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from walshcoupling import noise
from walshcoupling.errors import ConfigurationError
from walshcoupling.noise import SeedSpec, gen_driver, mix_drivers

from oracles import fisher_z_halfwidth, ks_critical


def _many(n_paths, steps, n_rays=3, dt=0.01, purpose=noise.DRIVER, master=7):
    return gen_driver(n_rays, dt, steps, noise.path_seeds(master, 1, purpose, range(n_paths)))


def test_determinism():
    a = gen_driver(3, 0.01, 100, SeedSpec(5, 9))
    b = gen_driver(3, 0.01, 100, SeedSpec(5, 9))
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.bridge, b.bridge)


def test_paths_do_not_depend_on_batching():
    seeds = noise.path_seeds(3, 2, noise.DRIVER, range(10))
    whole = gen_driver(2, 0.01, 50, seeds)
    part = gen_driver(2, 0.01, 50, seeds[4:7])
    assert np.array_equal(whole.increments[4:7], part.increments)


def test_bad_grid_rejected():
    with pytest.raises(ConfigurationError):
        gen_driver(3, 0.0, 10, SeedSpec(1))
    with pytest.raises(ConfigurationError):
        gen_driver(3, 0.01, 0, SeedSpec(1))
    with pytest.raises(ConfigurationError):
        SeedSpec(-1)


def test_uniforms_in_open_interval():
    u = noise.uniforms(SeedSpec(0, 0), 100_000)
    assert u.min() > 0.0 and u.max() < 1.0


def test_increment_mean_and_variance():
    dt = 0.01
    w = _many(1000, 334, n_rays=3, dt=dt)
    x = w.increments.ravel()[:1_000_000]
    assert abs(x.mean()) < 4 * math.sqrt(dt / x.size)
    assert abs(x.var() / dt - 1) < 0.01


def test_increments_are_gaussian():
    w = _many(100, 1000, n_rays=1, dt=0.01)
    z = w.increments.ravel() / 0.1
    assert stats.kstest(z, stats.norm.cdf).statistic < ks_critical(z.size)


def test_distinct_streams_uncorrelated():
    a = _many(1000, 1000, n_rays=1, purpose=noise.DRIVER).increments.ravel()
    b = _many(1000, 1000, n_rays=1, purpose=noise.DRIVER_HAT).increments.ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(a.size)


def test_mix_endpoints_exact():
    w = _many(3, 20, purpose=noise.DRIVER)
    v = _many(3, 20, purpose=noise.DRIVER_HAT)
    assert np.array_equal(mix_drivers(w, v, 1.0).increments, w.increments)
    assert np.array_equal(mix_drivers(w, v, 0.0).increments, v.increments)
    assert np.array_equal(mix_drivers(w, v, 0.0, complement=True).increments, w.increments)


def test_mix_correlation():
    w = _many(1000, 334, purpose=noise.DRIVER)
    v = _many(1000, 334, purpose=noise.DRIVER_HAT)
    m = mix_drivers(w, v, 0.8)
    a, b = m.increments.ravel()[:1_000_000], w.increments.ravel()[:1_000_000]
    rho = np.corrcoef(a, b)[0, 1]
    assert abs(rho - 0.8) < max(0.005, fisher_z_halfwidth(0.8, a.size))
    c = mix_drivers(w, v, 0.8, complement=True).increments.ravel()[:1_000_000]
    assert abs(np.corrcoef(a, c)[0, 1]) < 4 / math.sqrt(a.size)


def test_mix_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mix_drivers(_many(2, 10), _many(2, 11), 0.5)
    with pytest.raises(ConfigurationError):
        mix_drivers(_many(2, 10), _many(2, 10), 1.5)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0))
def test_mix_variance_is_dt(r):
    dt = 0.01
    w = _many(200, 250, n_rays=2, dt=dt, purpose=noise.DRIVER)
    v = _many(200, 250, n_rays=2, dt=dt, purpose=noise.DRIVER_HAT)
    x = mix_drivers(w, v, r).increments.ravel()
    # 1e5 entries: the variance ratio has sd sqrt(2/n) ~ 0.0045
    assert abs(x.var() / dt - 1) < 5 * math.sqrt(2 / x.size)


def test_bridge_minimum_law():
    # P(min over a unit step of a BM started at 0 is below -a) = 2 P(B_1 < -a)
    dt = 1.0
    w = _many(20_000, 5, n_rays=1, dt=dt)
    m = w.step_minima().ravel()
    assert np.all(m <= np.minimum(0.0, w.increments.ravel()))
    for a in (0.25, 0.5, 1.0, 2.0):
        expected = 2 * stats.norm.cdf(-a)
        assert abs(np.mean(m < -a) - expected) < 4 * math.sqrt(expected * (1 - expected) / m.size)


def test_seed_children_distinct():
    s = SeedSpec(1, 2)
    kids = {s.child(i) for i in range(1000)}
    assert len(kids) == 1000


def test_stream_id_packing():
    assert noise.stream_id(1, 2, 3) == (1 << 56) | (2 << 48) | 3
    with pytest.raises(ConfigurationError):
        noise.stream_id(256, 0, 0)
