import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from walshcoupling.errors import ConfigurationError, InvalidPointError
from walshcoupling.star_graph import (ORIGIN, GraphPoint, StarGraph, TestFunction, distance, distance_arrays,
                                      epsilon, eval_test_function, inverse_spider_transform, point,
                                      random_test_function, spider_radius, spider_transform, RadialIndicator)


def test_graph_validation():
    assert StarGraph(3).probs == (1 / 3,) * 3
    with pytest.raises(ConfigurationError):
        StarGraph(1)
    with pytest.raises(ConfigurationError):
        StarGraph(2, (0.0, 1.0))
    with pytest.raises(ConfigurationError):
        StarGraph(2, (0.5, 0.6))
    with pytest.raises(ConfigurationError):
        StarGraph(3, (0.5, 0.5))


def test_distance_examples():
    g = StarGraph.uniform(3)
    assert distance(g, point(1, 2.0), point(1, 0.5)) == 1.5
    assert distance(g, point(1, 1.0), point(2, 1.0)) == 2.0
    assert distance(g, ORIGIN, ORIGIN) == 0.0


def test_distance_rejects_bad_ray():
    with pytest.raises(InvalidPointError):
        distance(StarGraph.uniform(3), point(4, 1.0), ORIGIN)
    with pytest.raises(InvalidPointError):
        GraphPoint(1, -1.0)


def test_epsilon():
    assert epsilon(point(3, 0.7)) == 3
    assert epsilon(ORIGIN) is None
    assert epsilon(point(1, 1e-12)) == 1


def test_tiny_radius_becomes_origin():
    assert GraphPoint(2, 1e-320).is_origin


def test_spider_transform_examples():
    g = StarGraph(3, (0.5, 0.25, 0.25))
    y = spider_transform(g, point(1, 0.6))
    assert y.ray == 1 and y.radius == pytest.approx(0.4)
    assert spider_transform(g, ORIGIN) is ORIGIN
    u = StarGraph.uniform(4)
    assert spider_transform(u, point(2, 0.3)) == point(2, 0.3)


def test_test_function_examples():
    g = StarGraph(2, (0.5, 0.5))
    zero = TestFunction((0.0, 0.0), (0.0, 0.0))
    assert eval_test_function(g, zero, point(1, 0.7)) == (0.0, 0.0, 0.0)
    f = TestFunction((1.0, 0.0), (0.0, 0.0))
    _, d1, _ = eval_test_function(g, f, point(1, 1e-14))
    assert d1 == pytest.approx(1.0)
    assert TestFunction((1.0, -1.0), (0.0, 0.0)).in_class_d(g)
    assert not f.in_class_d(g)


def test_origin_convention():
    g = StarGraph(3, (0.5, 0.25, 0.25))
    f = TestFunction((1.0, 2.0, 4.0), (0.5, 0.0, -1.0))
    v, d1, d2 = eval_test_function(g, f, ORIGIN)
    assert v == 0.0
    assert d1 == pytest.approx(0.5 + 0.5 + 1.0)
    assert d2 == pytest.approx(0.5 * (1 - 1) + 0.25 * (0 - 2) + 0.25 * (-2 - 4))


def test_radial_indicator_slope():
    g = StarGraph(3, (0.5, 0.25, 0.25))
    f = RadialIndicator(2)
    val, d1, _ = f.evaluate(g, np.array([2, 1, 0]), np.array([0.3, 0.3, 0.0]))
    assert val[0] == pytest.approx(0.3 / 0.75) and val[1] == 0.0
    assert d1[2] == pytest.approx(1 / 3)
    assert f.boundary_slope(g) == pytest.approx(1 / 3)


# -- properties -----------------------------------------------------------------

rays = st.integers(min_value=0, max_value=4)
radii = st.floats(min_value=0.0, max_value=50.0, allow_nan=False)


def _pt(i, r):
    return point(i if i else None, r if i else 0.0)


@given(rays, radii, rays, radii, rays, radii)
def test_distance_is_metric(i, a, j, b, k, c):
    g = StarGraph.uniform(4)
    x, y, z = _pt(i, a), _pt(j, b), _pt(k, c)
    assert distance(g, x, y) == distance(g, y, x)
    assert distance(g, x, x) == 0.0
    assert distance(g, x, z) <= distance(g, x, y) + distance(g, y, z) + 1e-9
    if epsilon(x) != epsilon(y):
        assert distance(g, x, y) == distance(g, x, ORIGIN) + distance(g, ORIGIN, y)


@given(st.lists(st.floats(min_value=0.05, max_value=1.0), min_size=2, max_size=6), rays, radii)
def test_spider_transform_bijection(weights, i, r):
    p = np.array(weights) / sum(weights)
    p = p / p.sum()
    g = StarGraph(len(p), tuple(p[:-1]) + (1.0 - p[:-1].sum(),))
    x = _pt(min(i, g.n_rays), r)
    y = inverse_spider_transform(g, spider_transform(g, x))
    assert y.ray == x.ray
    assert y.radius == pytest.approx(x.radius, rel=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 3), st.floats(0.01, 5.0))
def test_finite_difference_matches_derivatives(seed, ray, r):
    g = StarGraph(3, (0.5, 0.25, 0.25))
    f = random_test_function(g, np.random.default_rng(seed), class_d=False)
    h = 1e-5
    v0, d1, d2 = f.evaluate(g, np.array([ray]), np.array([r]))
    vp, d1p, _ = f.evaluate(g, np.array([ray]), np.array([r + h]))
    vm, d1m, _ = f.evaluate(g, np.array([ray]), np.array([r - h]))
    scale = max(1.0, abs(d1[0]))
    assert abs((vp[0] - vm[0]) / (2 * h) - d1[0]) <= 1e-3 * scale
    assert abs((d1p[0] - d1m[0]) / (2 * h) - d2[0]) <= 1e-3 * max(1.0, abs(d2[0]))


@given(st.integers(0, 10_000))
def test_random_class_d_projection(seed):
    g = StarGraph(4, (0.1, 0.2, 0.3, 0.4))
    f = random_test_function(g, np.random.default_rng(seed))
    assert f.in_class_d(g)


def test_array_distance_matches_scalar():
    g = StarGraph(3, (0.5, 0.25, 0.25))
    rng = np.random.default_rng(0)
    rx, ry = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    ax, ay = rng.exponential(size=200), rng.exponential(size=200)
    d = distance_arrays(rx, ax, ry, ay)
    for k in range(200):
        assert d[k] == pytest.approx(distance(g, _pt(rx[k], ax[k]), _pt(ry[k], ay[k])))
    s = spider_radius(g, rx, ax)
    for k in range(200):
        assert s[k] == pytest.approx(spider_transform(g, _pt(rx[k], ax[k])).radius)
    assert math.isclose(s[rx == 0].sum(), 0.0)
