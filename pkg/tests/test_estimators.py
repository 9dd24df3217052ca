import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from walshcoupling import estimators as est
from walshcoupling import noise
from walshcoupling.errors import ConfigurationError, ConsistencyError, PreconditionError
from walshcoupling.sde_sim import (simulate_interface_euler, simulate_r_coupling, simulate_wbm_exact,
                                   simulate_wiener_coupling)
from walshcoupling.star_graph import RadialIndicator, StarGraph, TestFunction, point, random_test_function

from oracles import HALF_NORMAL_MEAN, arcsine_cdf, ks_critical

G3 = StarGraph.uniform(3)
GSKEW = StarGraph(3, (0.5, 0.25, 0.25))


def seeds(n, purpose, master=21, offset=0):
    return noise.path_seeds(master, 4, purpose, range(offset, offset + n))


def test_occupation_constant_path():
    assert est.local_time_occupation(np.full(101, 5.0), 0.01, 0.0, 0.1).value == 0.0


def test_occupation_reflected_and_standard_bm():
    n, dt = 2000, 1e-4
    x = simulate_wbm_exact(G3, 1.0, dt, seeds(n, noise.SCALAR))
    refl = est.local_time_occupation(x.radius, dt, 0.0, 0.01).value
    assert abs(refl.mean() - HALF_NORMAL_MEAN) < 3 * refl.std() / math.sqrt(n)
    b = np.zeros((n, x.steps + 1))
    np.cumsum(x.bx_increments, axis=1, out=b[:, 1:])
    std = est.local_time_occupation(b, dt, 0.0, 0.01).value
    assert abs(std.mean() - HALF_NORMAL_MEAN) < 3 * std.std() / math.sqrt(n)


def test_occupation_and_downcrossing_agree():
    n, dt, eps = 2000, 1e-4, 0.01
    x = simulate_wbm_exact(G3, 1.0, dt, seeds(n, noise.SCALAR, offset=10_000))
    occ = est.local_time_occupation(x.radius, dt, 0.0, eps).value.mean()
    dc = est.local_time_downcrossing(x.radius, 0.0, eps, touched=x.zero_visit, dt=dt).value.mean()
    assert abs(dc - occ) / occ < 0.10


def test_downcrossing_grid_correction_raises_count():
    x = simulate_wbm_exact(G3, 1.0, 1e-3, seeds(300, noise.SCALAR, offset=30_000))
    raw = est.local_time_downcrossing(x.radius, 0.0, 0.03, touched=x.zero_visit).value.mean()
    shifted = est.local_time_downcrossing(x.radius, 0.0, 0.03, touched=x.zero_visit, dt=1e-3).value.mean()
    assert shifted > raw


def test_downcrossing_counts_simple_path():
    path = np.array([0.0, 0.5, 1.2, 0.3, -0.1, 1.5, 0.0])
    assert est.local_time_downcrossing(path, 0.0, 1.0).value == pytest.approx(2.0)


def test_qv_band_positive_control():
    n, dt = 2000, 1e-4
    x = simulate_wbm_exact(G3, 1.0, dt, seeds(n, noise.SCALAR, offset=20_000))
    v = est.local_time_qv(x.radius, 0.01, x.bx_increments).value
    assert abs(v.mean() - HALF_NORMAL_MEAN) < 3 * v.std() / math.sqrt(n)
    # weighting by the reflected increments themselves undercounts at eps = sqrt(dt)
    assert est.local_time_qv(x.radius, 0.01).value.mean() < v.mean()


def test_distance_local_time_zero_for_identical_paths():
    w = noise.gen_driver(3, 0.01, 100, seeds(20, noise.DRIVER))
    run = simulate_wiener_coupling(G3, w, seeds(20, noise.RAYS_X), seeds(20, noise.RAYS_Y))
    from walshcoupling.sde_sim import CouplingRun
    same = CouplingRun(run.x_path, run.x_path, w)
    assert np.all(est.local_time_of_distance(same, 0.05).value == 0)


def test_last_zero_examples():
    x = simulate_wbm_exact(G3, 1.0, 0.01, seeds(50, noise.SCALAR))
    g1 = est.last_zero(x, 0.5)
    g2 = est.last_zero(x, 1.0)
    assert np.all(g1 <= g2)
    y = simulate_interface_euler(G3, noise.gen_driver(3, 0.01, 10, seeds(1, noise.DRIVER)), seeds(1, noise.RAYS_X),
                                 x0=point(1, 100.0))
    with pytest.raises(ConsistencyError):
        est.last_zero(y, 0.1)


def test_last_zero_at_start_only():
    from walshcoupling.sde_sim import SamplePath
    k = 10
    zero = np.zeros((1, k + 1), dtype=bool)
    zero[0, 0] = True
    p = SamplePath(G3, 0.1, np.ones((1, k + 1), np.int8), np.ones((1, k + 1)), zero, np.ones((1, k), np.int8),
                   np.zeros((1, k)), np.zeros((1, k + 1)))
    assert est.last_zero(p, 1.0)[0] == 0.0


def test_last_zero_arcsine():
    from walshcoupling.stats import ks_test
    n, dt = 20_000, 1e-3
    x = simulate_wbm_exact(G3, 1.0, dt, seeds(n, noise.SCALAR))
    g = est.last_zero(x, 1.0)
    out = ks_test(g, arcsine_cdf, support=np.arange(x.steps + 1) * dt)
    assert out.statistic < ks_critical(n)


def test_quadratic_covariation_oracles():
    rng = np.random.default_rng(0)
    k, dt = 10_000, 1e-3
    u = rng.normal(0, math.sqrt(dt), k)
    v = rng.normal(0, math.sqrt(dt), k)
    assert abs(est.quadratic_covariation(u, u)[-1] - k * dt) < 3 * math.sqrt(2 * k) * dt
    assert abs(est.quadratic_covariation(u, v)[-1]) < 3 * math.sqrt(k) * dt
    with pytest.raises(ConfigurationError):
        est.quadratic_covariation(u, v[:-1])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-3, 3))
def test_quadratic_covariation_bilinear_symmetric(xs, c):
    u = np.array(xs)
    v = np.cos(np.arange(len(xs)))
    assert np.allclose(est.quadratic_covariation(u, v), est.quadratic_covariation(v, u))
    assert np.allclose(est.quadratic_covariation(c * u + v, v),
                       c * est.quadratic_covariation(u, v) + est.quadratic_covariation(v, v))


def test_interface_residual_zero_function_and_precondition():
    w = noise.gen_driver(3, 0.01, 100, seeds(5, noise.DRIVER))
    x = simulate_interface_euler(G3, w, seeds(5, noise.RAYS_X))
    zero = TestFunction((0.0,) * 3, (0.0,) * 3)
    assert est.interface_sde_residual(x, w, zero).sup_abs_residual.max() == 0.0
    with pytest.raises(PreconditionError):
        est.interface_sde_residual(x, w, TestFunction((1.0, 0.0, 0.0), (0.0,) * 3))


def test_interface_residual_off_interface_is_taylor_error():
    dt = 1e-3
    w = noise.gen_driver(3, dt, 100, seeds(50, noise.DRIVER))
    x = simulate_interface_euler(G3, w, seeds(50, noise.RAYS_X), x0=point(1, 50.0))
    f = TestFunction((1.0, -0.5, -0.5), (0.3, 0.1, 0.0))
    rep = est.interface_sde_residual(x, w, f)
    step_err = np.abs(np.diff(rep.residual, axis=1))
    # far from the origin the derivatives carry a factor exp(-50); only Taylor terms remain
    assert step_err.max() < 1e-12


def test_residual_terms_sum():
    w = noise.gen_driver(3, 0.01, 100, seeds(10, noise.DRIVER))
    x = simulate_interface_euler(GSKEW, w, seeds(10, noise.RAYS_X))
    f = random_test_function(GSKEW, np.random.default_rng(3), class_d=False)
    rep = est.freidlin_sheu_residual(x, f)
    assert np.allclose(sum(rep.terms.values()), rep.residual)
    fd = random_test_function(GSKEW, np.random.default_rng(4), class_d=True)
    rep_d = est.freidlin_sheu_residual(x, fd)
    assert np.abs(rep_d.terms["local_time"]).max() < 1e-12


def _median_sup(fn, dt, n=300):
    steps = int(round(1 / dt))
    w = noise.gen_driver(3, dt, steps, seeds(n, noise.DRIVER, offset=int(1 / dt)))
    x = simulate_interface_euler(GSKEW, w, seeds(n, noise.RAYS_X, offset=int(1 / dt)))
    return float(np.median(fn(x, w)))


def test_freidlin_sheu_residual_shrinks_with_mesh():
    f = random_test_function(GSKEW, np.random.default_rng(5), class_d=False)
    coarse = _median_sup(lambda x, w: est.freidlin_sheu_residual(x, f).sup_abs_residual, 1e-2)
    fine = _median_sup(lambda x, w: est.freidlin_sheu_residual(x, f).sup_abs_residual, 1e-3)
    assert fine < coarse


def test_spider_components():
    w = noise.gen_driver(3, 0.01, 100, seeds(20, noise.DRIVER))
    x = simulate_interface_euler(GSKEW, w, seeds(20, noise.RAYS_X))
    c = est.spider_components(x)
    assert np.array_equal(c.sum(axis=0), x.spider())
    assert np.all(c[:, x.ray == 0] == 0)
    u = simulate_interface_euler(G3, noise.gen_driver(3, 0.01, 100, seeds(5, noise.DRIVER)), seeds(5, noise.RAYS_X))
    assert np.allclose(est.spider_components(u).sum(axis=0), u.radius)


def test_spider_component_gap_matches_radial_identity():
    w = noise.gen_driver(3, 1e-3, 1000, seeds(200, noise.DRIVER))
    x = simulate_interface_euler(GSKEW, w, seeds(200, noise.RAYS_X))
    gap = est.spider_component_gap(x)
    assert gap.shape == (3, 200, 1001)
    f = RadialIndicator(1)
    assert np.allclose(gap[0], est.freidlin_sheu_residual(x, f).residual)
    # the gap is the discretisation error of the boundary term, of order sqrt(dt) per hit
    assert np.median(np.abs(gap).max(axis=2)) < 0.5


def test_local_time_exclusion_identical_and_independent():
    n = 300
    w = noise.gen_driver(3, 1e-3, 1000, seeds(n, noise.DRIVER))
    run = simulate_wiener_coupling(G3, w, seeds(n, noise.RAYS_X), seeds(n, noise.RAYS_Y))
    from walshcoupling.sde_sim import CouplingRun
    same = CouplingRun(run.x_path, run.x_path, w)
    assert est.local_time_exclusion(same, 0.0) == (1.0, 1.0)
    w_hat = noise.gen_driver(3, 1e-3, 1000, seeds(n, noise.DRIVER_HAT))
    ind = simulate_r_coupling(G3, w, w_hat, 0.0, seeds(n, noise.RAYS_X), seeds(n, noise.RAYS_Y))
    fx, fy = est.local_time_exclusion(ind, math.sqrt(1e-3))
    assert fx < 0.2 and fy < 0.2


def test_distance_martingale_shapes():
    n = 50
    w = noise.gen_driver(3, 0.01, 100, seeds(n, noise.DRIVER))
    run = simulate_wiener_coupling(G3, w, seeds(n, noise.RAYS_X), seeds(n, noise.RAYS_Y))
    m = est.distance_martingale(run)
    assert m.shape == (n, 101)
    assert np.all(m[:, 0] == 0)
    b = est.balayage_process(run, 100)
    assert b.shape == (n,)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_spider_components_sum_property(master):
    w = noise.gen_driver(3, 0.05, 20, noise.path_seeds(master, 4, noise.DRIVER, range(10)))
    x = simulate_interface_euler(GSKEW, w, noise.path_seeds(master, 4, noise.RAYS_X, range(10)))
    assert np.array_equal(est.spider_components(x).sum(axis=0), x.spider())
