import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from odst import oracle, synth
from odst.oracle import (OracleDomainError, OraclePoint, bayes_base, bayes_iter_closed,
                         bayes_iter_recursive, bayes_limit, recursive_step)


def test_base_example():
    pt = OraclePoint(1.0, 1.0, np.array([0.7, 0.3]))
    # (0.7 + 0.5) / 2, (0.3 + 0.5) / 2
    np.testing.assert_allclose(bayes_base(pt), [0.6, 0.4], atol=1e-15)


def test_iterates_example():
    pt = OraclePoint(1.0, 1.0, np.array([1.0, 0.0]))
    np.testing.assert_allclose(bayes_iter_closed(pt, 0), [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(bayes_iter_closed(pt, 2), [0.9375, 0.0625], atol=1e-15)
    np.testing.assert_allclose(bayes_iter_recursive(pt, 1), [0.875, 0.125], atol=1e-15)


def test_posterior_is_fixed_point():
    post = np.array([0.5, 0.3, 0.2])
    pt = OraclePoint(0.4, 2.0, post)
    np.testing.assert_allclose(recursive_step(pt, post), post, atol=1e-15)


def test_limit():
    post = np.array([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(bayes_limit(OraclePoint(1e-3, 1.0, post)), post)
    np.testing.assert_array_equal(bayes_limit(OraclePoint(0.0, 1.0, post)), np.full(3, 1 / 3))
    np.testing.assert_allclose(bayes_iter_closed(OraclePoint(1e-3, 1.0, post), 100_000), post, atol=1e-12)


def test_zero_in_density_gives_uniform_forever():
    pt = OraclePoint(0.0, 3.0, np.array([0.9, 0.1]))
    for t in (0, 1, 10):
        np.testing.assert_array_equal(bayes_iter_closed(pt, t), [0.5, 0.5])


def test_domain_errors():
    pt = OraclePoint(0.0, 0.0, np.array([0.5, 0.5]))
    with pytest.raises(OracleDomainError):
        bayes_base(pt)
    with pytest.raises(OracleDomainError):
        bayes_iter_closed(pt, 0)
    with pytest.raises(ValueError):
        bayes_iter_closed(OraclePoint(1.0, 1.0, np.array([0.5, 0.5])), -1)


@given(st.floats(0.0, 10.0), st.floats(1e-3, 10.0), st.integers(0, 30))
def test_distance_to_posterior_decays_geometrically(pin, pall, t):
    post = np.array([0.6, 0.3, 0.1])
    pt = OraclePoint(pin, pall, post)
    d0 = np.abs(bayes_iter_closed(pt, 0) - pt.class_posterior).sum()
    dt = np.abs(bayes_iter_closed(pt, t) - pt.class_posterior).sum()
    assert dt == pytest.approx(pt.r ** t * d0, rel=1e-9, abs=1e-15)


def test_closed_matches_recursive_batch():
    b = oracle.random_points(2000, 5, seed=3)
    for t in (0, 1, 7, 50):
        np.testing.assert_allclose(b.closed(t), b.recursive(t), rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.closed(0), b.base(), rtol=0, atol=1e-12)
    for i in (0, 17, 1999):
        np.testing.assert_allclose(b.closed(4)[i], bayes_iter_closed(b.point(i), 4), atol=1e-15)


def test_far_from_in_distribution_stays_near_uniform():
    # at r = 0.93 even 200 iterations leave a measurable pull toward uniform
    pt = OraclePoint(0.07, 0.93, np.array([1.0, 0.0]))
    p = bayes_iter_closed(pt, 200)
    assert p[0] < 1.0 and 0.93 ** 201 * 0.5 == pytest.approx(p[1], rel=1e-9)


def test_oracle_points_rescaling_is_exact():
    world = synth.default_ring()
    X = np.array([[0.5, 0.5], [1.0, -1.0], [4.0, 0.0]])
    b = oracle.oracle_points(world, X)
    pin, pall = synth.density_in(world, X), synth.density_all(world, X)
    np.testing.assert_allclose(b.r, pall / (pin + pall), rtol=1e-12)


def test_evaluation_points_shape():
    world = synth.default_ring()
    X = oracle.evaluation_points(world, seed=0, grid=11, n_samples=50)
    assert X.shape == (121 + 50, 2)
    np.testing.assert_array_equal(X, oracle.evaluation_points(world, seed=0, grid=11, n_samples=50))


def test_oracle_gap_of_oracle_is_zero():
    world = synth.default_ring()
    X = oracle.evaluation_points(world, seed=1, grid=21, n_samples=100)
    b = oracle.oracle_points(world, X)
    assert oracle.oracle_gap(b.base(), world, X) == 0.0
    assert oracle.oracle_gap(b.limit(), world, X, "LIMIT") == 0.0
    assert oracle.oracle_gap(b.closed(3), world, X, 3) == 0.0
    with pytest.raises(ValueError):
        oracle.oracle_gap(b.base()[:, :2], world, X)
